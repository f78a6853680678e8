#pragma once

#include "vbltr/error.hpp"
#include "vbltr/tensor.hpp"
#include "vbltr/special.hpp"
#include "vbltr/parallel.hpp"
#include "vbltr/model.hpp"
#include "vbltr/inference.hpp"
#include "vbltr/predict.hpp"
#include "vbltr/eval.hpp"
#include "vbltr/io.hpp"
