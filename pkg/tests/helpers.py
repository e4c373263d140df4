"""Shared fixtures-by-function for the test suite."""


from chaincrf import Family, RepresentationSequence, init_params, make_rng

# dims used by families that need them; softmax/vanilla ignore d_t/d_r
SMALL = dict(num_labels=4, d_h=5, d_t=4, d_r=3, length=5, mlp_hidden=8)


def random_lattice(M, L, seed, scale=1.0):
    return scale * make_rng(seed).standard_normal((M, L, L))


def random_reps(M, d_h, seed):
    return RepresentationSequence.from_array(make_rng(seed).standard_normal((M, d_h)))


def small_params(family, seed=0):
    return init_params(
        Family(family), SMALL["num_labels"], SMALL["d_h"], seed=seed,
        d_t=SMALL["d_t"], d_r=SMALL["d_r"], mlp_hidden=SMALL["mlp_hidden"],
    )


def small_reps(seed=1):
    return random_reps(SMALL["length"], SMALL["d_h"], seed)
