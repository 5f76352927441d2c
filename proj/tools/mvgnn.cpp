#include <iostream>

#include "mvgnn/cli.hpp"
#include "mvgnn/tensor.hpp"

int main(int argc, char** argv) {
  mvgnn::diff::tune_allocator();
  return mvgnn::cli::run(argc, argv, std::cout, std::cerr);
}
