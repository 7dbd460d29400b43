#include <iostream>
#include <string>
#include <vector>

#include "dapnet/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dapnet::cli::dispatch(args, std::cout, std::cerr);
}
