"""Learning-to-rank engine pairing forum queries with experts.

Expert representations come from profile-queried multi-head attention over
history-dialogue embeddings; a self-learning stage first aligns the profile and
dialogue writing registers in embedding space.
"""

__version__ = "0.1.0"

from .corpus import Corpus, load_corpus, split_dataset, tokenize  # noqa: F401
from .ranker import ModelConfig, RecModel, evaluate, rank, train  # noqa: F401
