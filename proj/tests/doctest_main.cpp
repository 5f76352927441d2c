#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "mvgnn/tensor.hpp"

int main(int argc, char** argv) {
  mvgnn::diff::tune_allocator();
  return doctest::Context(argc, argv).run();
}
