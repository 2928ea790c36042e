// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "trialign/alignloss.hpp"
#include "trialign/checkpoint.hpp"
#include "trialign/config_json.hpp"
#include "trialign/datamodel.hpp"
#include "trialign/encoder.hpp"
#include "trialign/error.hpp"
#include "trialign/evalkit.hpp"
#include "trialign/linalg.hpp"
#include "trialign/mining.hpp"
#include "trialign/retrieval.hpp"
#include "trialign/service.hpp"
#include "trialign/synthetic.hpp"
#include "trialign/trainer.hpp"
