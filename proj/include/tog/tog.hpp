#pragma once

#include "tog/attacks.hpp"
#include "tog/data.hpp"
#include "tog/detector.hpp"
#include "tog/error.hpp"
#include "tog/eval.hpp"
#include "tog/geometry.hpp"
#include "tog/io.hpp"
#include "tog/numerics.hpp"
#include "tog/parallel.hpp"
#include "tog/rng.hpp"
#include "tog/tensor.hpp"
