#include "dqd2v/cli.hpp"

int main(int argc, char** argv) { return dqd2v::cli::run(argc, argv); }
