#include <string>
#include <vector>

#include "preftok/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return preftok::cli_dispatch(args);
}
