from hiersfl import data, ldp, nn, protocols


def make_setup(K=4, M=2, P=4, p1=1, p2=1, E=1, seed=0, dims=(16, 12, 8, 10),
               samples_per_label=24, labels_per_client=2, epsilon=None, momentum=0.5,
               batch_size=8, dataset=None, **extra):
    classes = dims[-1]
    if dataset is None:
        per_class = data.required_per_class(K, labels_per_client, samples_per_label, classes)
        dataset = data.generate_synthetic(seed, per_class * classes, dims[0], classes)
    plan = data.partition_noniid(dataset, K, labels_per_client, samples_per_label, seed)
    privacy = ldp.PrivacyConfig(epsilon or 1.0, 0.5, enabled=epsilon is not None)
    return protocols.Setup(
        stack=nn.LayerStack.from_dims(dims),
        dataset=dataset,
        plan=plan,
        topology=protocols.Topology.balanced(K, M),
        schedule=protocols.Schedule(P, p1, p2, E),
        momentum=momentum,
        batch_size=batch_size,
        privacy=privacy,
        seed=seed,
        **extra,
    )


def centralized_sgd(setup, rounds, reset_mask=None):
    """Single-client momentum SGD written directly against nn.

    ``reset_mask`` selects the velocity coordinates cleared after each round
    (all of them by default), mirroring the optimizer restart that follows an
    aggregation overwrite.
    """
    stack = setup.stack
    params = nn.init_params(stack, setup.seed)
    opt = nn.OptimizerState(setup.learning_rate, setup.decay, setup.momentum)
    pool = setup.pool()
    losses, trajectory = [], []
    epoch = 0
    for _ in range(rounds):
        for _ in range(setup.schedule.epochs):
            for x, y in data.batches(setup.dataset, setup.plan, 0, setup.batch_size, setup.seed, epoch):
                acts, _ = nn.forward(stack, params, x)
                params = nn.sgd_step(params, nn.backward(stack, params, acts, y), opt)
            opt.end_epoch()
            epoch += 1
        if opt.velocity is not None:
            if reset_mask is None:
                opt.velocity = None
            else:
                opt.velocity = opt.velocity.copy()
                opt.velocity[reset_mask] = 0.0
        loss, _ = protocols.evaluate(stack, params, pool)
        losses.append(loss)
        trajectory.append(params)
    return losses, trajectory
