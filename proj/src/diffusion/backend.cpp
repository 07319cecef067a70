#include "harmonia/diffusion/backend.hpp"

#include "harmonia/diffusion/toy_backend.hpp"
#include "harmonia/errors.hpp"

namespace harmonia::diffusion {

std::unique_ptr<DiffusionBackend> make_backend(const BackendConfig& config) {
    std::unique_ptr<DiffusionBackend> backend;
    if (config.kind == "toy") {
        backend = std::make_unique<ToyBackend>();
    } else if (config.kind == "stable-diffusion" || config.kind == "sd") {
        throw BackendUnavailable("backend '" + config.kind +
                                 "' requires an inference runtime that is not linked into this build (weights: " +
                                 config.weights.string() + ")");
    } else {
        throw ConfigError("unknown backend kind '" + config.kind + "'");
    }
    backend->set_steps(config.steps);
    return backend;
}

}  // namespace harmonia::diffusion
