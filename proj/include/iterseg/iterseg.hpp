#pragma once

#include "iterseg/autograd.hpp"
#include "iterseg/backbone.hpp"
#include "iterseg/config.hpp"
#include "iterseg/episodes.hpp"
#include "iterseg/evaluation.hpp"
#include "iterseg/fusion.hpp"
#include "iterseg/io.hpp"
#include "iterseg/nn.hpp"
#include "iterseg/pipeline.hpp"
#include "iterseg/pretrain.hpp"
#include "iterseg/prior.hpp"
#include "iterseg/refine.hpp"
#include "iterseg/tensor.hpp"
#include "iterseg/training.hpp"
