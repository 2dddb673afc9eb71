from .config import (LayerWeights, MaskSet, ModelBundle, ModelConfig,
                     ModelWeights, default_vocab, init_weights)
from .corpus import CorpusSpec, gen_corpus, markov_transitions, mixed_corpus
from .checkpoint import (CheckpointError, checkpoint_load, checkpoint_save,
                         read_container, write_container)
from .model import (ForwardTape, Gradients, StaleTapeError, backward,
                    cross_entropy, forward_masked, log_softmax, perplexity)
from .train import TrainingDivergedError, train_toy

__all__ = [
    "CheckpointError", "CorpusSpec", "ForwardTape", "Gradients", "LayerWeights",
    "MaskSet", "ModelBundle", "ModelConfig", "ModelWeights", "StaleTapeError",
    "TrainingDivergedError", "backward", "checkpoint_load", "checkpoint_save",
    "cross_entropy", "default_vocab", "forward_masked", "gen_corpus",
    "init_weights", "log_softmax", "markov_transitions", "mixed_corpus",
    "perplexity", "read_container", "train_toy", "write_container",
]
