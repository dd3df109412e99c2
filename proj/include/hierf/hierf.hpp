#pragma once

#include "hierf/covariance.hpp"
#include "hierf/learner.hpp"
#include "hierf/matrix.hpp"
#include "hierf/metrics.hpp"
#include "hierf/pipeline.hpp"
#include "hierf/reconcile.hpp"
#include "hierf/summation.hpp"
#include "hierf/tree.hpp"
#include "hierf/treebuild.hpp"
