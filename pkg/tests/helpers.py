from xmodal.config import RunConfig

TINY = {
    "model.d_model": 16, "model.n_heads": 2, "model.n_layers_text": 1, "model.n_layers_visual": 1,
    "model.n_layers_fusion": 1, "model.n_layers_decoder": 1, "model.vocab_size": 100,
    "model.max_text_len": 16, "image_side": None,
    "data.n_pairs": 64, "data.n_eval": 16, "data.n_attr": 4, "data.n_obj": 4,
    "train.batch_size": 4, "schedule.total_steps": 20, "schedule.warmup_steps": 2,
    "schedule.base_lr": 1e-3, "schedule.floor_lr": 1e-5,
}
TINY.pop("image_side")


def tiny_config(**extra) -> RunConfig:
    vals = dict(TINY)
    vals.update({k.replace("__", ".", 1): v for k, v in extra.items()})
    return RunConfig(vals)
