#pragma once

#include "vmtt/checkpoint.hpp"
#include "vmtt/corpus.hpp"
#include "vmtt/csv.hpp"
#include "vmtt/decoder.hpp"
#include "vmtt/encoders.hpp"
#include "vmtt/experiment.hpp"
#include "vmtt/grad_check.hpp"
#include "vmtt/layers.hpp"
#include "vmtt/masking.hpp"
#include "vmtt/metrics.hpp"
#include "vmtt/model.hpp"
#include "vmtt/rescoring.hpp"
#include "vmtt/rng.hpp"
#include "vmtt/serialization.hpp"
#include "vmtt/tensor.hpp"
#include "vmtt/training.hpp"
#include "vmtt/transducer.hpp"
