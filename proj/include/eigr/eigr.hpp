#pragma once

#include "eigr/common.hpp"
#include "eigr/binary_io.hpp"
#include "eigr/ingest.hpp"
#include "eigr/synthetic.hpp"
#include "eigr/ggcn.hpp"
#include "eigr/temporal.hpp"
#include "eigr/ges.hpp"
#include "eigr/influence.hpp"
#include "eigr/ugindex.hpp"
#include "eigr/pipeline.hpp"
