#include <iostream>

#include "ksanc/cli.hpp"

int main(int argc, char** argv) { return ksanc::cli::run(argc, argv, std::cout, std::cerr); }
