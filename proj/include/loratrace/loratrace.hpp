#pragma once

// Umbrella header.

#include "loratrace/errors.hpp"
#include "loratrace/gradcheck.hpp"
#include "loratrace/lora.hpp"
#include "loratrace/matrix.hpp"
#include "loratrace/model.hpp"
#include "loratrace/obfuscate.hpp"
#include "loratrace/pipeline.hpp"
#include "loratrace/reconstruct.hpp"
#include "loratrace/rng.hpp"
#include "loratrace/svd.hpp"
#include "loratrace/threading.hpp"
#include "loratrace/tracer.hpp"
#include "loratrace/weights_io.hpp"
