#include "osediff/cli.hpp"

int main(int argc, char** argv) { return osediff::dispatch(argc, argv); }
