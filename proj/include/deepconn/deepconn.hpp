#pragma once

// Convenience umbrella: pulls in the whole library.

#include <deepconn/baselines.hpp>
#include <deepconn/common.hpp>
#include <deepconn/config.hpp>
#include <deepconn/eval.hpp>
#include <deepconn/harness.hpp>
#include <deepconn/ingest.hpp>
#include <deepconn/model.hpp>
#include <deepconn/nnkernel.hpp>
#include <deepconn/textrep.hpp>
#include <deepconn/train.hpp>
