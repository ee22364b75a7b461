// SPDX-License-Identifier: Apache-2.0
#include "diffuse/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return diffuse::run(argc, argv, std::cout, std::cerr); }
