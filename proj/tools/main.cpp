#include <iostream>

#include "slt/cli.hpp"

int main(int argc, char** argv) { return slt::run({argv, argv + argc}, std::cout, std::cerr); }
