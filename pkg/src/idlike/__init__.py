"""Few-shot out-of-distribution detection with learned ID and OOD prompts.

Outliers are mined from crops of the few in-distribution shots; ID and OOD
prompt contexts are trained against a frozen dual encoder, and test images
are scored by how much of their similarity mass falls on the ID prompts.
"""

from .detect import (
    Detector,
    ScoreRecord,
    Verdict,
    calibrate_gamma,
    classify,
    detect,
    score_idlike,
    score_idlike_logit,
    score_mcm,
    score_mcm_logit,
    score_msp,
    score_record,
)
from .embedcore import SimilarityRow, cosine_similarity, log_sum_exp, normalize, similarity_row
from .encoder import AdapterBackend, EncoderBackend, ImageRef, TokenSequence, ToyBackend, toy_backend
from .metrics import EvalResult, auroc, fpr_at_tpr, id_accuracy
from .miner import MinedDatasets, MinerConfig, build_mined_datasets, filter_crops, generate_crops

__version__ = "0.1.0"
