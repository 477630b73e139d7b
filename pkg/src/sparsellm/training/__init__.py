from .corpus import GENERATORS, arithmetic_example, generate_text, task_text, to_tokens
from .data import (
    PRETRAIN_PROPORTIONS,
    Batch,
    DataMixture,
    Source,
    TaskData,
    eval_windows,
    make_mixture,
    pretrain_mixture,
    proportions_table,
    sample_mixture,
    sample_sources,
)
from .finetune import (
    STAGES,
    FinetuneConfig,
    FinetuneMode,
    FinetuneResult,
    ModelState,
    calibrate,
    cubic_schedule,
    dense_finetune,
    one_shot_prune,
    run_finetune,
    sparse_pretrain,
)
from .loop import (
    DistillConfig,
    TrainConfig,
    TrainState,
    default_loss,
    distill_loss_fn,
    evaluate,
    masked_sgd_update,
    sparse_train_step,
    squarehead_loss,
    train,
)
from .torch_model import TorchTransformer, lm_loss
