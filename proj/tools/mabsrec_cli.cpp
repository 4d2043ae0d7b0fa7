#include <iostream>

#include "mabsrec/cli.hpp"

int main(int argc, char** argv) { return mabsrec::cli::run(argc, argv, std::cout, std::cerr); }
