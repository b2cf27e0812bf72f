#pragma once

#include <set>
#include <string>
#include <type_traits>

#include "cwdiff/error.hpp"
#include "json.hpp"

namespace cwdiff {

/// Reads optional fields from a JSON object with type checks; finish()
/// rejects keys that were never asked for.
class JsonFields {
public:
    JsonFields(const nlohmann::json& j, std::string context) : j_(j), context_(std::move(context)) {
        require(j_.is_object(), ErrorKind::schema, context_ + " must be a JSON object");
    }

    template <typename T>
    JsonFields& get(const std::string& key, T& dst) {
        seen_.insert(key);
        if (!j_.contains(key)) return *this;
        const nlohmann::json& v = j_.at(key);
        bool ok;
        if constexpr (std::is_same_v<T, bool>) {
            ok = v.is_boolean();
        } else if constexpr (std::is_integral_v<T>) {
            ok = v.is_number_integer() && (std::is_signed_v<T> || v.get<long long>() >= 0);
        } else if constexpr (std::is_floating_point_v<T>) {
            ok = v.is_number();
        } else if constexpr (std::is_same_v<T, std::string>) {
            ok = v.is_string();
        } else {
            ok = true;
        }
        require(ok, ErrorKind::schema, context_ + "." + key + " has the wrong type");
        try {
            dst = v.get<T>();
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::schema, context_ + "." + key + ": " + e.what());
        }
        return *this;
    }

    /// Marks a key as known without reading it (handled by a nested reader).
    JsonFields& known(const std::string& key) {
        seen_.insert(key);
        return *this;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            require(seen_.contains(key), ErrorKind::schema, "unknown key '" + key + "' in " + context_);
        }
    }

private:
    const nlohmann::json& j_;
    std::string context_;
    std::set<std::string> seen_;
};

}  // namespace cwdiff
