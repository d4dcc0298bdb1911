#include "patchlens/bundle.hpp"

namespace patchlens {

ModelBundle toy_bundle(std::uint64_t seed, std::size_t queue_capacity) {
    ModelBundle b;
    b.id = "toy";
    auto weights = make_random_model(toy_config(), seed);
    b.model = std::make_shared<ModelHandle>(weights, Capabilities{}, queue_capacity);
    auto tok = std::make_shared<Tokenizer>(toy_vocabulary(toy_config().vocab_size));
    b.encoder = std::make_shared<StubVisionEncoder>(weights, *tok, StubVisionEncoder::Options{1.0, 0.05, seed});
    b.tokenizer = std::move(tok);
    return b;
}

}  // namespace patchlens
