#pragma once

// Umbrella header for the self-supervised pretraining workbench.

#include "sslwb/augmentation.hpp"
#include "sslwb/checkpoint.hpp"
#include "sslwb/config.hpp"
#include "sslwb/data.hpp"
#include "sslwb/dataset.hpp"
#include "sslwb/engine.hpp"
#include "sslwb/evaluation.hpp"
#include "sslwb/image.hpp"
#include "sslwb/models.hpp"
#include "sslwb/nn.hpp"
#include "sslwb/objectives.hpp"
#include "sslwb/optimizer.hpp"
#include "sslwb/rng.hpp"
#include "sslwb/synthetic.hpp"
#include "sslwb/tensor.hpp"
