from .losses import lambda_schedule, margin_loss, margin_terms
from .retrieval import RetrievalMetrics, evaluate_retrieval
from .synthetic import (Batch, BatchComposition, PairSample, SyntheticTask, generate_pools,
                        generate_synthetic_batch, make_pair)
from .trainer import RunRecord, TrainConfig, TrainingDiverged, total_loss, train
