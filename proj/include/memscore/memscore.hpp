#pragma once

#include "memscore/checkpoint.hpp"
#include "memscore/datasets.hpp"
#include "memscore/error.hpp"
#include "memscore/eval.hpp"
#include "memscore/featurevis.hpp"
#include "memscore/image_io.hpp"
#include "memscore/metrics.hpp"
#include "memscore/models.hpp"
#include "memscore/plot.hpp"
#include "memscore/preprocess.hpp"
#include "memscore/rng.hpp"
#include "memscore/scoring.hpp"
#include "memscore/service.hpp"
#include "memscore/tensor.hpp"
#include "memscore/training.hpp"
