#pragma once

#include <stdexcept>
#include <string>

namespace chameleon {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map failures to exit codes in one place.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class EmptyLossError : public Error {
public:
    using Error::Error;
};

class StaleTapeError : public Error {
public:
    using Error::Error;
};

class VocabularyError : public Error {
public:
    using Error::Error;
};

class LengthError : public Error {
public:
    using Error::Error;
};

class DoubleWrapError : public Error {
public:
    using Error::Error;
};

class ContextShapeError : public Error {
public:
    using Error::Error;
};

class EmptyContextError : public Error {
public:
    using Error::Error;
};

class InfeasibleError : public Error {
public:
    using Error::Error;
};

class CorpusError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class NonFiniteLossError : public Error {
public:
    using Error::Error;
};

}  // namespace chameleon
