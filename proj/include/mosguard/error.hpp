#pragma once

#include <stdexcept>
#include <string>

namespace mosguard {

// Failures caused by bad inputs (files, shapes, arguments) derive from
// data_error; failures of the numerics themselves derive from numeric_error.
// The CLI maps the two families onto distinct exit codes.

class data_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class dimension_error : public data_error {
 public:
  using data_error::data_error;
};

class domain_error : public data_error {
 public:
  using data_error::data_error;
};

class contract_error : public data_error {
 public:
  using data_error::data_error;
};

class length_error : public data_error {
 public:
  using data_error::data_error;
};

class empty_signal_error : public data_error {
 public:
  using data_error::data_error;
};

class format_error : public data_error {
 public:
  using data_error::data_error;
};

class channel_count_error : public format_error {
 public:
  using format_error::format_error;
};

class io_error : public data_error {
 public:
  using data_error::data_error;
};

class parse_error : public data_error {
 public:
  using data_error::data_error;
};

class incompatible_model_error : public data_error {
 public:
  using data_error::data_error;
};

class version_error : public data_error {
 public:
  using data_error::data_error;
};

class training_error : public numeric_error {
 public:
  using numeric_error::numeric_error;
};

class attack_error : public numeric_error {
 public:
  using numeric_error::numeric_error;
};

}  // namespace mosguard
