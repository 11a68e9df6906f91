use pgvlab_core::agents::{run_training, Agent, AgentConfig};
use pgvlab_core::envs::{CartPole, PointMass};
use pgvlab_core::{Env, Variant};

fn small(variant: Variant) -> AgentConfig {
    AgentConfig {
        variant,
        batch_size: 128,
        minibatch: 32,
        epochs: 2,
        extra: 2,
        horizon: 3,
        hidden: vec![8],
        model_hidden: vec![8],
        q_hidden: vec![8],
        model_steps: 5,
        q_epochs: 1,
        ..AgentConfig::default()
    }
}

#[test]
fn training_is_reproducible_for_every_variant() {
    for v in Variant::ALL {
        let run = || {
            let (curve, agent) =
                run_training(&mut PointMass::new(1), &mut PointMass::new(2), &small(v), 3, 512, 256, 1).unwrap();
            (curve, agent.learner.actor)
        };
        assert_eq!(run(), run(), "{v}");
    }
}

#[test]
fn seeds_change_the_run() {
    let cfg = small(Variant::Ppo);
    let a = run_training(&mut PointMass::new(1), &mut PointMass::new(2), &cfg, 3, 256, 256, 1).unwrap().1;
    let b = run_training(&mut PointMass::new(1), &mut PointMass::new(2), &cfg, 4, 256, 256, 1).unwrap().1;
    assert_ne!(a.learner.actor, b.learner.actor);
}

#[test]
fn extra_samples_only_matter_when_present() {
    // with no extra samples every variant is PPO; with some, MBMA departs
    let space = CartPole::new(0).action_space();
    let mut agents: Vec<Agent> =
        [Variant::Ppo, Variant::Mbma].iter().map(|&v| Agent::new(4, &space, small(v), 7).unwrap()).collect();
    let mut envs = [CartPole::new(8), CartPole::new(8)];
    for (a, e) in agents.iter_mut().zip(envs.iter_mut()) {
        a.iterate(e, 0).unwrap();
    }
    assert_eq!(agents[0].learner.actor, agents[1].learner.actor);
    for (a, e) in agents.iter_mut().zip(envs.iter_mut()) {
        a.iterate(e, 2).unwrap();
    }
    assert_ne!(agents[0].learner.actor, agents[1].learner.actor);
}

#[test]
fn agent_counts_real_steps_only() {
    let mut agent = Agent::new(4, &PointMass::new(0).action_space(), small(Variant::Mbpo), 1).unwrap();
    let mut env = PointMass::new(2);
    let it = agent.iterate(&mut env, 2).unwrap();
    assert_eq!(it.env_steps, 128);
    assert_eq!(agent.env_steps, 128);
}
