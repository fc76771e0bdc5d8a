//! Scratch diagnostic for the room-transfer experiment: runs the pretrain
//! pipeline, then separates high-level from low-level generalization by
//! evaluating with oracle subgoals and measuring subgoal-embedding fidelity.
//!
//! Usage: tune key=value...  (ep, hor, noise, k, d, repr, rbatch, hrl,
//! batch, seed, eval_eps, eval_hor, env, lam, beta, kappa, ph, vh)

use std::collections::HashMap;
use std::sync::Mutex;

use carl_lab::carl::{CarlConfig, CarlModel};
use carl_lab::data::{self, GoalMode};
use carl_lab::env::{Action, Cell, Env, EpisodeConfig, GridRoomsEnv};
use carl_lab::eval::{self, TransferSpec};
use carl_lab::hrl::{Algorithm, CoTrainConfig, EncoderMode, HrlAgent};
use carl_lab::nn::Matrix;
use carl_lab::{Error, Result};

fn parse_usizes(v: &str) -> Vec<usize> {
    v.split(',').filter(|s| !s.is_empty()).map(|s| s.parse().unwrap()).collect()
}

fn main() -> Result<()> {
    let mut args: HashMap<String, String> = HashMap::new();
    for a in std::env::args().skip(1) {
        let (k, v) = a.split_once('=').expect("args are key=value");
        args.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str, d: &str| args.get(k).cloned().unwrap_or_else(|| d.to_string());
    let getf = |k: &str, d: f64| get(k, &d.to_string()).parse::<f64>().unwrap();
    let getu = |k: &str, d: usize| get(k, &d.to_string()).parse::<usize>().unwrap();

    let env = Env::from_spec(&get("env", "rooms5"))?;
    let genv = env.rooms()?.clone();
    let episodes = getu("ep", 300);
    let horizon = getu("hor", 150);
    let noise = getf("noise", 0.1);
    let seed = getu("seed", 1) as u64;

    let carl_cfg = CarlConfig {
        k: getu("k", 3),
        d: getu("d", 16),
        tau: getf("tau", 0.1),
        phi_hidden: parse_usizes(&get("phi", "64,64,64")),
        psi_hidden: parse_usizes(&get("psi", "32,32")),
        ..CarlConfig::default()
    };
    let cfg = CoTrainConfig {
        algorithm: Algorithm::Hiql,
        mode: EncoderMode::Pretrain,
        lambda_aux: getf("lam", 0.0),
        beta: getf("beta", 3.0),
        kappa: getf("kappa", 0.7),
        gamma: getf("gamma", 0.99),
        carl: carl_cfg,
        value_hidden: parse_usizes(&get("vh", "64,64")),
        high_hidden: parse_usizes(&get("hh", "64,64")),
        low_hidden: parse_usizes(&get("lh", "")),
        batch_size: getu("batch", 256),
        lr: getf("lr", carl_lab::nn::DEFAULT_LR),
        ..CoTrainConfig::default()
    };
    let spec = TransferSpec {
        train_rooms: parse_usizes(&get("train", "0")),
        test_rooms: parse_usizes(&get("test", "1,2,3,4")),
        repr_steps: getu("repr", 2000),
        repr_batch: getu("rbatch", 256),
        goal_mode: if get("goal", "interior") == "surface" {
            GoalMode::Surface
        } else {
            GoalMode::Interior
        },
        hrl_steps: getu("hrl", 4000),
        eval_episodes: getu("eval_eps", 20),
        horizon: getu("eval_hor", 200),
    };

    let t0 = std::time::Instant::now();
    let ep_cfg = EpisodeConfig { horizon, start_rooms: None };
    let ds = data::generate_dataset(&env, &ep_cfg, episodes, noise, seed)?;
    println!("dataset: {} trajectories, {} transitions", ds.trajectories.len(), ds.num_transitions());

    let (agent, outcome) = eval::room_generalization(&cfg, &spec, &ds, &env, seed)?;
    println!("[{:?}] standard pipeline:", t0.elapsed());
    println!("  train: mean {:.3}, rooms {}/{}", outcome.train.mean_success(), outcome.train.rooms_solved, spec.train_rooms.len());
    for r in &outcome.train.per_room {
        println!("    room {}: {:.3}", r.room, r.success_rate);
    }
    println!("  test:  mean {:.3}, rooms {}/{}", outcome.test.mean_success(), outcome.test.rooms_solved, spec.test_rooms.len());
    for r in &outcome.test.per_room {
        println!("    room {}: {:.3}", r.room, r.success_rate);
    }

    // Oracle-subgoal evaluation: replace the high level with a BFS oracle
    // that picks the true k-step-ahead cell, embedded by the trained
    // encoder. Measures how well the low level alone generalizes.
    let k = cfg.carl.k;
    let encoder = agent.encoder.as_ref().expect("pretrain agent has an encoder");
    let all_rooms: Vec<usize> = (0..genv.num_rooms()).collect();
    let dist_cache: Mutex<HashMap<Cell, std::sync::Arc<Vec<u32>>>> = Mutex::new(HashMap::new());
    let genv2 = genv.clone();
    let oracle = eval::as_policy(|s: &[f32], g: &[f32], _rng: &mut carl_lab::util::Rng| {
        let sc = genv2.cell_from_features(s)?;
        let gc = genv2.cell_from_features(g)?;
        let dist = {
            let mut cache = dist_cache.lock().unwrap();
            if !cache.contains_key(&gc) {
                let d = genv2.distances_to(gc)?;
                cache.insert(gc, std::sync::Arc::new(d));
            }
            cache[&gc].clone()
        };
        let sub = oracle_subgoal(&genv2, sc, k, &dist);
        low_action(&agent, encoder, s, &genv2.features(sub))
    });
    let oracle_report = eval::evaluate_policy(&env, &all_rooms, spec.eval_episodes, spec.horizon, seed + 7, &oracle)?;
    println!("[{:?}] oracle-subgoal low-level eval:", t0.elapsed());
    for r in &oracle_report.per_room {
        println!("    room {}: {:.3}", r.room, r.success_rate);
    }

    // Subgoal-embedding fidelity: cosine between the high level's output and
    // the encoder embedding of the true k-step subgoal, over every ordered
    // in-room pair.
    println!("[{:?}] high-level fidelity (cosine to oracle z*):", t0.elapsed());
    for room in 0..genv.num_rooms() {
        let cells: Vec<Cell> = genv.cells_in_room(room).collect();
        let mut cosines = Vec::new();
        for &gc in &cells {
            let dist = genv.distances_to(gc)?;
            for &sc in &cells {
                if sc == gc {
                    continue;
                }
                let s = genv.features(sc);
                let g = genv.features(gc);
                let sub = oracle_subgoal(&genv, sc, k, &dist);
                let z_star = encoder.embed_state_goal(&s, &genv.features(sub))?;
                let mut input = Matrix::zeros(1, 4);
                input.row_mut(0)[..2].copy_from_slice(&s);
                input.row_mut(0)[2..].copy_from_slice(&g);
                let z_hat = agent.high.forward_only(&input)?;
                cosines.push(cosine(z_hat.row(0), &z_star));
            }
        }
        let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
        let min = cosines.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("    room {}: mean {:.3}, min {:.3} over {} pairs", room, mean, min, cosines.len());
    }
    println!("total {:?}", t0.elapsed());
    Ok(())
}

fn oracle_subgoal(genv: &GridRoomsEnv, s: Cell, k: usize, dist: &[u32]) -> Cell {
    let mut c = s;
    for _ in 0..k {
        if dist[genv.cell_id(c).unwrap()] == 0 {
            break;
        }
        let next = Action::ALL
            .into_iter()
            .map(|a| genv.step_cell(c, a))
            .min_by_key(|&n| dist[genv.cell_id(n).unwrap()])
            .unwrap();
        c = next;
    }
    c
}

fn low_action(agent: &HrlAgent, encoder: &CarlModel, s: &[f32], sub: &[f32]) -> Result<Action> {
    let z = encoder.embed_state_goal(s, sub)?;
    let mut input = Matrix::zeros(1, s.len() + z.len());
    input.row_mut(0)[..s.len()].copy_from_slice(s);
    for (slot, &v) in input.row_mut(0)[s.len()..].iter_mut().zip(&z) {
        *slot = v;
    }
    let logits = agent.low.forward_only(&input)?;
    let row = logits.row(0);
    let idx = (0..row.len())
        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite logits"))
        .ok_or_else(|| Error::contract("empty logits"))?;
    Ok(Action::ALL[idx])
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}
