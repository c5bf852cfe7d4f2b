#pragma once

#include <stdexcept>
#include <string>

namespace loratrace {

enum class errc {
    empty_input,
    bad_parameter,
    dimension_mismatch,
    out_of_vocab,
    bad_permutation,
    numeric_failure,
    probe_degenerate,
    incompatible_models,
    masked_index,
    // weights_io codes, one per detectable corruption class
    io_failure,
    malformed_manifest,
    checksum_mismatch,
    shape_mismatch,
    unknown_dtype,
    missing_tensor,
    bad_config,
};

inline const char* errc_name(errc c) {
    switch (c) {
        case errc::empty_input: return "empty_input";
        case errc::bad_parameter: return "bad_parameter";
        case errc::dimension_mismatch: return "dimension_mismatch";
        case errc::out_of_vocab: return "out_of_vocab";
        case errc::bad_permutation: return "bad_permutation";
        case errc::numeric_failure: return "numeric_failure";
        case errc::probe_degenerate: return "probe_degenerate";
        case errc::incompatible_models: return "incompatible_models";
        case errc::masked_index: return "masked_index";
        case errc::io_failure: return "io_failure";
        case errc::malformed_manifest: return "malformed_manifest";
        case errc::checksum_mismatch: return "checksum_mismatch";
        case errc::shape_mismatch: return "shape_mismatch";
        case errc::unknown_dtype: return "unknown_dtype";
        case errc::missing_tensor: return "missing_tensor";
        case errc::bad_config: return "bad_config";
    }
    return "unknown";
}

class error : public std::runtime_error {
public:
    error(errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    errc code() const noexcept { return code_; }

private:
    errc code_;
};

} // namespace loratrace
