"""Joint learning of knowledge-graph embeddings and Horn rules."""

from .embedding import EmbeddingState, KGEmbedding, TrainConfig
from .graph import Dictionary, KnowledgeGraph, LabeledTriple, Triple, load_dataset, load_tsv, sparsity
from .rules import Atom, Rule, RuleMetrics, RuleMiner, Term, mine
from .scoring import make_score_function

__version__ = "0.1.0"

__all__ = [
    "Atom", "Dictionary", "EmbeddingState", "KGEmbedding", "KnowledgeGraph", "LabeledTriple",
    "Rule", "RuleMetrics", "RuleMiner", "Term", "TrainConfig", "Triple", "load_dataset",
    "load_tsv", "make_score_function", "mine", "sparsity",
]
