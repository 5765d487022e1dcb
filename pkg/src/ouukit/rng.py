"""Counter-based random substreams keyed by (seed, stream, index).

Every stochastic quantity in the pipeline is drawn from its own Philox
substream, so sample i of stream s is bit-identical no matter in which
order (or on which thread) it is generated.
"""

import numpy as np

# Stream ids. Keep these stable: they are part of the reproducibility
# contract of every dataset/report produced by the pipeline.
STREAM_DATA_FIELD = 0    # random field samples for training data
STREAM_DATA_CONTROL = 1  # control samples for training data
STREAM_OPT_FIELD = 2     # field samples frozen for one optimization run
STREAM_EVAL_FIELD = 3    # field samples for ground-truth evaluation
STREAM_NET_INIT = 4      # network weight initialization
STREAM_NET_SHUFFLE = 5   # epoch shuffling during training


def substream(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Return the Generator for substream (seed, stream, index)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.Philox(ss))
