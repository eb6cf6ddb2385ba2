#include <iostream>

#include "poolnet/cli.hpp"

int main(int argc, char** argv) {
  return poolnet::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
