import os

# XLA's default intra-op thread pool thrashes badly on single-CPU
# machines, slowing the sampling tests several-fold; pin it to one
# thread there. Must run before jax is imported.
if os.cpu_count() == 1 and "XLA_FLAGS" not in os.environ:
    os.environ["XLA_FLAGS"] = ("--xla_cpu_multi_thread_eigen=false "
                               "intra_op_parallelism_threads=1")
