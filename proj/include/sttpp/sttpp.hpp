#pragma once

#include "sttpp/common.hpp"
#include "sttpp/discrete.hpp"
#include "sttpp/event.hpp"
#include "sttpp/graph.hpp"
#include "sttpp/grid.hpp"
#include "sttpp/io.hpp"
#include "sttpp/kernel.hpp"
#include "sttpp/mlp.hpp"
#include "sttpp/model.hpp"
#include "sttpp/objectives.hpp"
#include "sttpp/optimizer.hpp"
#include "sttpp/predict.hpp"
#include "sttpp/rng.hpp"
#include "sttpp/simulate.hpp"
