#pragma once

#include "sword/authproto.hpp"
#include "sword/cluster.hpp"
#include "sword/harness.hpp"
#include "sword/identity.hpp"
#include "sword/merkle.hpp"
#include "sword/simnet.hpp"
#include "sword/sync.hpp"
#include "sword/tal.hpp"
#include "sword/wire.hpp"
