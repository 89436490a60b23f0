from .flops import flops_per_exit
from .harness import (ExitReport, Query, clone_eval, positive_pair_scores, pretrain_accuracy, retrieval_eval,
                      training_recall, triplet_queries)
from .index import EmbeddingIndex, build_index, search
from .metrics import RankedList, map_multi, mrr, ndcg_binary, recall_at_k
from .permtest import permutation_test
from .report import tradeoff_report

__all__ = [
    "EmbeddingIndex", "ExitReport", "Query", "RankedList", "build_index", "clone_eval", "flops_per_exit",
    "map_multi", "mrr", "ndcg_binary", "permutation_test", "positive_pair_scores", "pretrain_accuracy",
    "recall_at_k", "retrieval_eval", "search", "tradeoff_report", "training_recall", "triplet_queries",
]
