import torch

# single-threaded kernels keep CPU results reproducible across machines
torch.set_num_threads(1)
