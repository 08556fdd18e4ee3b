#include <iostream>

#include "dispatch.h"

int main(int argc, char** argv) {
  return mmt::cli::dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
