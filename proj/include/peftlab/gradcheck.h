#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace peftlab {

struct GradcheckOptions {
    std::size_t trials = 20;
    double step = 1e-5;
    double tolerance = 1e-3;
    // Coordinates sampled per tensor per trial; 0 checks all of them.
    std::size_t max_coords = 64;
    // Name of a check whose adjoint is deliberately scaled by 1.5. Used to
    // prove the suite can fail.
    std::string corrupt;
};

struct GradcheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    bool passed = false;
};

// Central finite differences against the tape adjoints for every op and for
// the adapter parameter classes lora.A, lora.B, adalora.A, adalora.alpha,
// adalora.B, ia3.gamma. Inputs are uniform in [-2, 2].
//
// Per coordinate the error is |analytic - numeric| / max(|analytic|,
// |numeric|, 1e-6).
std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, const GradcheckOptions& options = {});

// Names run_gradcheck reports, in order.
std::vector<std::string> gradcheck_names();

}  // namespace peftlab
