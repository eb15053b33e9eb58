from .bootstrap import (StabilityConfig, StabilityRecord, bootstrap_means, percentile, select_stable_features,
                        stability_records, stability_score)
from .enrichment import ContingencyTable, EnrichmentResult, fisher_enrichment, hypergeom_tail
from .metrics import MetricsReport, classification_metrics
