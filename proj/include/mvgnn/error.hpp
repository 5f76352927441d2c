#pragma once

#include <stdexcept>
#include <string>

namespace mvgnn {

// Every library error carries the module and operation that raised it, so the
// CLI can print a single diagnostic line of the form "module::operation: detail".
class Error : public std::runtime_error {
 public:
  Error(std::string module, std::string operation, const std::string& detail)
      : std::runtime_error(module + "::" + operation + ": " + detail),
        module_(std::move(module)),
        operation_(std::move(operation)) {}

  const std::string& module() const noexcept { return module_; }
  const std::string& operation() const noexcept { return operation_; }

 private:
  std::string module_;
  std::string operation_;
};

#define MVGNN_DEFINE_ERROR(Name)        \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  };

MVGNN_DEFINE_ERROR(InvalidGradeError)
MVGNN_DEFINE_ERROR(InvalidMapError)
MVGNN_DEFINE_ERROR(ShapeError)
MVGNN_DEFINE_ERROR(IndexError)
MVGNN_DEFINE_ERROR(ContractError)
MVGNN_DEFINE_ERROR(FormatError)
MVGNN_DEFINE_ERROR(IoError)
MVGNN_DEFINE_ERROR(GraphTooSmallError)
MVGNN_DEFINE_ERROR(SimulationDivergedError)
MVGNN_DEFINE_ERROR(TrainingDivergedError)

#undef MVGNN_DEFINE_ERROR

}  // namespace mvgnn
