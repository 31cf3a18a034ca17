#pragma once

#include "monkeynet/inference.hpp"
#include "monkeynet/synthdata.hpp"
#include "monkeynet/trainer.hpp"
#include "monkeynet/visualize.hpp"
