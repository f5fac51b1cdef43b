#pragma once

#include "mosguard/error.hpp"
#include "mosguard/rng.hpp"
#include "mosguard/signal.hpp"
#include "mosguard/wav.hpp"
#include "mosguard/tensor.hpp"
#include "mosguard/autodiff.hpp"
#include "mosguard/adam.hpp"
#include "mosguard/finite_diff.hpp"
#include "mosguard/fft.hpp"
#include "mosguard/spectral.hpp"
#include "mosguard/parallel.hpp"
#include "mosguard/predictor.hpp"
#include "mosguard/model_io.hpp"
#include "mosguard/corpus.hpp"
#include "mosguard/attack.hpp"
#include "mosguard/defense.hpp"
#include "mosguard/human_study.hpp"
