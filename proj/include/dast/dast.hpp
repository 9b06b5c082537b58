#pragma once

#include "dast/autodiff.hpp"
#include "dast/checkpoint.hpp"
#include "dast/corpus.hpp"
#include "dast/layers.hpp"
#include "dast/maml.hpp"
#include "dast/metrics.hpp"
#include "dast/multiwoz.hpp"
#include "dast/optim.hpp"
#include "dast/rng.hpp"
#include "dast/student.hpp"
#include "dast/synth.hpp"
#include "dast/teacher.hpp"
#include "dast/trainer.hpp"
#include "dast/visualize.hpp"
