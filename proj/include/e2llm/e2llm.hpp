#pragma once

#include "e2llm/augment.hpp"
#include "e2llm/autograd.hpp"
#include "e2llm/checkpoint.hpp"
#include "e2llm/config.hpp"
#include "e2llm/error.hpp"
#include "e2llm/eval.hpp"
#include "e2llm/grad_check.hpp"
#include "e2llm/io.hpp"
#include "e2llm/model.hpp"
#include "e2llm/optim.hpp"
#include "e2llm/report.hpp"
#include "e2llm/rope.hpp"
#include "e2llm/tensor.hpp"
#include "e2llm/text.hpp"
#include "e2llm/train.hpp"
