#pragma once

#include "natlab/checkpoint.hpp"
#include "natlab/corpus.hpp"
#include "natlab/hungarian.hpp"
#include "natlab/kv_file.hpp"
#include "natlab/log_prob_matrix.hpp"
#include "natlab/losses.hpp"
#include "natlab/metrics.hpp"
#include "natlab/model.hpp"
#include "natlab/oracle.hpp"
#include "natlab/rng.hpp"
#include "natlab/sweep.hpp"
#include "natlab/trainer.hpp"
