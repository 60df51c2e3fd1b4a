#pragma once

#include <stdexcept>
#include <string>

namespace nppc {

/// Base for every error raised by the library. Carries an exit code so the
/// command-line front end can map failures without string matching.
class Error : public std::runtime_error {
public:
    enum class Kind { Numeric, Shape, Config, Io };

    Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

#define NPPC_DEFINE_ERROR(Name, KindValue)                                      \
    class Name : public Error {                                                 \
    public:                                                                     \
        explicit Name(const std::string& what) : Error(KindValue, #Name ": " + what) {} \
    }

NPPC_DEFINE_ERROR(DegenerateDirections, Kind::Numeric);
NPPC_DEFINE_ERROR(NotSymmetric, Kind::Numeric);
NPPC_DEFINE_ERROR(NotPsd, Kind::Numeric);
NPPC_DEFINE_ERROR(NotOrthonormal, Kind::Numeric);
NPPC_DEFINE_ERROR(InsufficientSamples, Kind::Numeric);
NPPC_DEFINE_ERROR(SingularSolve, Kind::Numeric);
NPPC_DEFINE_ERROR(ZeroError, Kind::Numeric);
NPPC_DEFINE_ERROR(NumericFailure, Kind::Numeric);
NPPC_DEFINE_ERROR(NonScalarLoss, Kind::Shape);
NPPC_DEFINE_ERROR(ShapeMismatch, Kind::Shape);
NPPC_DEFINE_ERROR(BadIndex, Kind::Config);
NPPC_DEFINE_ERROR(InvalidConfig, Kind::Config);
NPPC_DEFINE_ERROR(MissingMeanModel, Kind::Config);
NPPC_DEFINE_ERROR(IoError, Kind::Io);

#undef NPPC_DEFINE_ERROR

}  // namespace nppc
