// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace dsc {

/// Base of every error raised by the library. Subclasses name the failure
/// category so callers (and the CLI) can report it without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define DSC_DEFINE_ERROR(Name)            \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

DSC_DEFINE_ERROR(DimensionError);
DSC_DEFINE_ERROR(ContractError);
DSC_DEFINE_ERROR(NumericError);
DSC_DEFINE_ERROR(LengthError);
DSC_DEFINE_ERROR(CapacityError);
DSC_DEFINE_ERROR(HeadKindError);
DSC_DEFINE_ERROR(ParseError);
DSC_DEFINE_ERROR(SchemaError);
DSC_DEFINE_ERROR(EmptyDatasetError);
DSC_DEFINE_ERROR(ModeError);
DSC_DEFINE_ERROR(IntegrityError);
DSC_DEFINE_ERROR(ConfigError);
DSC_DEFINE_ERROR(BudgetError);
DSC_DEFINE_ERROR(InfeasibleError);
DSC_DEFINE_ERROR(CheckpointError);
DSC_DEFINE_ERROR(BadMagicError);
DSC_DEFINE_ERROR(UnsupportedVersionError);
DSC_DEFINE_ERROR(TruncatedError);
DSC_DEFINE_ERROR(ConfigMismatchError);

#undef DSC_DEFINE_ERROR

}  // namespace dsc
