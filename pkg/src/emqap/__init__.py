"""Question answering over instructional e-manuals."""

from .corpus import Manual, RawDocument, Section, Sentence, clean_text, corpus_stats, segment, split_sentences
from .encoder import EncoderConfig, LayeredEncoder, Vocab
from .harness import DatasetSplit, ExperimentConfig, dataset_stats, load_qa_dataset, run_experiment, split_dataset
from .metrics import MetricReport, emd, exact_match, rouge_l, swms
from .mtl import MTLModel, QARecord, infer, train_mtl, train_sqp
from .pretrain import PretrainConfig, ewc_penalty, estimate_fisher, layer_lr_schedule, mlm_loss, mlm_mask, pretrain
from .retrieval import RetrievalIndex, build_index, hits_at_k, top_k

__version__ = "0.1.0"

__all__ = [
    "Manual", "RawDocument", "Section", "Sentence", "clean_text", "corpus_stats", "segment", "split_sentences",
    "EncoderConfig", "LayeredEncoder", "Vocab",
    "DatasetSplit", "ExperimentConfig", "dataset_stats", "load_qa_dataset", "run_experiment", "split_dataset",
    "MetricReport", "emd", "exact_match", "rouge_l", "swms",
    "MTLModel", "QARecord", "infer", "train_mtl", "train_sqp",
    "PretrainConfig", "ewc_penalty", "estimate_fisher", "layer_lr_schedule", "mlm_loss", "mlm_mask", "pretrain",
    "RetrievalIndex", "build_index", "hits_at_k", "top_k",
]
