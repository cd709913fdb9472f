#pragma once

// Umbrella header: the full pre-training, evaluation and tooling surface.

#include "mimco/adamw.hpp"
#include "mimco/augment.hpp"
#include "mimco/checkpoint.hpp"
#include "mimco/config.hpp"
#include "mimco/dataset.hpp"
#include "mimco/eval.hpp"
#include "mimco/heads.hpp"
#include "mimco/image.hpp"
#include "mimco/key_queue.hpp"
#include "mimco/linalg.hpp"
#include "mimco/losses.hpp"
#include "mimco/masking.hpp"
#include "mimco/nn.hpp"
#include "mimco/rng.hpp"
#include "mimco/runner.hpp"
#include "mimco/teacher.hpp"
#include "mimco/trainer.hpp"
#include "mimco/vit.hpp"
