#pragma once

// c10's logging header defines a glog-style CHECK; doctest's takes over here.
#include <torch/torch.h>
#undef CHECK

#include <doctest.h>
