from .metrics import detection_metrics, gzsl_metrics, harmonic_mean, kfold_aggregate, weighted_group_accuracy
from .baselines import baseline_knn, baseline_mcm, baseline_msp

__all__ = ["detection_metrics", "gzsl_metrics", "harmonic_mean", "kfold_aggregate", "weighted_group_accuracy",
           "baseline_knn", "baseline_mcm", "baseline_msp"]
