#pragma once

#include "ekd/errors.hpp"
#include "ekd/tensor.hpp"
#include "ekd/conv.hpp"
#include "ekd/layers.hpp"
#include "ekd/ensemble.hpp"
#include "ekd/losses.hpp"
#include "ekd/data.hpp"
#include "ekd/metrics.hpp"
#include "ekd/trainer.hpp"
#include "ekd/checkpoint.hpp"
#include "ekd/analysis.hpp"
#include "ekd/config.hpp"
#include "ekd/experiment.hpp"
#include "ekd/oracle.hpp"
