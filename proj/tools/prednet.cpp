#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include "prednet/cli.hpp"

int main(int argc, char** argv) {
  // Keep large activation buffers on the heap between minibatches instead of
  // returning them to the kernel every step.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
  std::vector<std::string> args(argv + 1, argv + argc);
  return prednet::cli::run(args, std::cout, std::cerr);
}
