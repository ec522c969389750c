#pragma once

// Statically typed front end over Engine. A record type supplies its schema
// and conversions; mismatched types are rejected at compile time.
//
//   struct Count {
//     std::string scratch_work;
//     std::int64_t character_count = 0;
//     static Schema schema();
//     Json to_record() const;
//     static Count from_record(const Json& j);
//   };

#include <concepts>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lmsub/engine.hpp"

namespace lmsub {

template <typename T>
concept RecordType = requires(const T& value, const Json& record) {
  { T::schema() } -> std::convertible_to<Schema>;
  { value.to_record() } -> std::convertible_to<Json>;
  { T::from_record(record) } -> std::same_as<T>;
};

template <RecordType In, RecordType Out>
class TypedSubroutine {
 public:
  struct Result {
    Invocation invocation;
    std::optional<Out> output;  // empty when the invocation failed
  };

  TypedSubroutine(Engine& engine, std::string name, std::string task_doc,
                  std::optional<std::string> context = std::nullopt)
      : engine_(engine),
        handle_(engine.declare(SubroutineSpec{std::move(name), std::move(task_doc), In::schema(), Out::schema(),
                                              std::move(context)})) {}

  Result operator()(const In& input, const std::vector<std::string>& parents = {},
                    const InvokeOptions& options = {}) {
    Result r{engine_.invoke(handle_, input.to_record(), parents, options), std::nullopt};
    if (r.invocation.output) r.output = Out::from_record(*r.invocation.output);
    return r;
  }

  const SubroutineHandle& handle() const { return handle_; }

 private:
  Engine& engine_;
  SubroutineHandle handle_;
};

}  // namespace lmsub
