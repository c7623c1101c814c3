#pragma once

#include "ensmooth/bounds.hpp"
#include "ensmooth/certify.hpp"
#include "ensmooth/cli.hpp"
#include "ensmooth/classifier.hpp"
#include "ensmooth/ensemble.hpp"
#include "ensmooth/errors.hpp"
#include "ensmooth/io.hpp"
#include "ensmooth/random.hpp"
#include "ensmooth/theory.hpp"
