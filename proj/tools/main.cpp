#include "app.hpp"

int main(int argc, char** argv) { return longalign::app::main(argc, argv); }
