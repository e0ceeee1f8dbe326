#pragma once

// libtorch's logging header defines its own CHECK; doctest's must win.
#include <torch/torch.h>
#undef CHECK
#include <doctest.h>
