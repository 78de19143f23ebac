#pragma once

#include <stdexcept>
#include <string>

namespace hexform {

// Base class of every error the library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define HEXFORM_ERROR(NAME)                                   \
  struct NAME : Error {                                       \
    explicit NAME(const std::string& msg)                     \
        : Error(std::string(#NAME) + ": " + msg) {}           \
  }

// tensor core
HEXFORM_ERROR(ShapeMismatch);
HEXFORM_ERROR(NonFiniteValue);
HEXFORM_ERROR(NonFiniteGradient);
HEXFORM_ERROR(NotScalarLoss);

// model
HEXFORM_ERROR(SeqTooLong);
HEXFORM_ERROR(VocabOverflow);
HEXFORM_ERROR(NonFiniteMaskValue);
HEXFORM_ERROR(BadConfig);

// approximation components
HEXFORM_ERROR(DidNotConverge);
HEXFORM_ERROR(EmptyCalibration);
HEXFORM_ERROR(MissingAffineNorm);
HEXFORM_ERROR(NonFiniteLoss);

// data
HEXFORM_ERROR(InvalidSpec);
HEXFORM_ERROR(ParseError);
HEXFORM_ERROR(LabelOutOfSchema);

// ciphertext backend
HEXFORM_ERROR(DepthExceeded);
HEXFORM_ERROR(KeyMismatch);
HEXFORM_ERROR(LevelMismatch);
HEXFORM_ERROR(TooManySlots);
HEXFORM_ERROR(EncodeOverflow);

// protocol
HEXFORM_ERROR(MalformedBlob);
HEXFORM_ERROR(ProtocolVersionMismatch);
HEXFORM_ERROR(SessionAborted);
HEXFORM_ERROR(ChannelClosed);
HEXFORM_ERROR(EmptyQuery);

// checkpoints
HEXFORM_ERROR(CheckpointError);

#undef HEXFORM_ERROR

// Raised by any attempt to run a non-arithmetic primitive on ciphertext.
struct UnsupportedOp : Error {
  std::string op;
  explicit UnsupportedOp(std::string op_name)
      : Error("UnsupportedOp: '" + op_name + "' is not a homomorphic operation"),
        op(std::move(op_name)) {}
};

}  // namespace hexform
