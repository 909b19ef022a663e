#pragma once

#include "maskcd/config.hpp"
#include "maskcd/io/change_map.hpp"
#include "maskcd/io/checkpoint.hpp"
#include "maskcd/io/dataset.hpp"
#include "maskcd/io/synthetic.hpp"
#include "maskcd/losses.hpp"
#include "maskcd/metrics.hpp"
#include "maskcd/model.hpp"
#include "maskcd/train.hpp"
