#pragma once

#include "smoothem/bspline.hpp"
#include "smoothem/mixture.hpp"
#include "smoothem/pipeline.hpp"
#include "smoothem/rng.hpp"
#include "smoothem/simulate.hpp"
#include "smoothem/smoother.hpp"
#include "smoothem/theory.hpp"
