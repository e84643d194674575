"""Train the desk-scale model on the planted-factor task and watch the loss fall.

Token counts are divided by 20 so a few hundred steps finish in well under a
minute on one CPU core.
"""

from moec_hga.pipeline import desk_config, fit, init_params, make_eval_set, task_loss_on


def main(steps=300):
    config = desk_config(20)
    print("groups:", {s.group_name: s.token_count for s in config.encoder_specs})
    params = init_params(config)
    eval_set = make_eval_set(config)
    print(f"eval loss before training: {task_loss_on(params, eval_set, config):.4f}")

    def log(step, params, state, report):
        if (step + 1) % 50 == 0:
            balance = sum(report.balance.values())
            print(f"step {step + 1:4d}  task {report.task_loss:.4f}  balance {balance:.3f}  total {report.total:.4f}")

    params, _, _ = fit(params, config, steps, 16, 0.5, on_step=log)
    print(f"eval loss after {steps} steps: {task_loss_on(params, eval_set, config):.4f}")


if __name__ == "__main__":
    main()
