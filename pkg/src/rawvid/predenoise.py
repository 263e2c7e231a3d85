"""Frame-level wrapper around the packed-plane pre-denoiser."""
import torch

from .errors import StateError
from .raw import BayerFrame, pack_array, unpack_array


def predenoise_frame(noisy: BayerFrame, model) -> BayerFrame:
    """Pack, run the network in inference mode, unpack. Output has the input's shape and pattern."""
    if not noisy.normalized:
        raise StateError("pre-denoiser expects a normalized frame")
    dtype = next(model.parameters()).dtype
    planes = torch.as_tensor(pack_array(noisy.data, noisy.pattern), dtype=dtype)[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(planes)[0].double().numpy()
    model.train(was_training)
    return noisy.replace(data=unpack_array(out, noisy.pattern))
