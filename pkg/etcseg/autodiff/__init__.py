from etcseg.autodiff.tensor import Tensor, as_tensor, is_grad_enabled, no_grad
from etcseg.autodiff.gradcheck import grad_check
from etcseg.autodiff import ops, special, nn_ops

__all__ = ['Tensor', 'as_tensor', 'is_grad_enabled', 'no_grad', 'grad_check', 'ops', 'special', 'nn_ops']
