use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::vector::ParamVec;

use super::config::{Fusion, MethodConfig};

/// `m_r = (x_{r−1} − x_r) / (αηP)`.
pub fn infer_server_momentum(
    x_prev: &ParamVec,
    x_cur: &ParamVec,
    alpha: f64,
    eta: f64,
    steps: usize,
) -> Result<ParamVec> {
    if !(alpha > 0.0 && eta > 0.0 && steps > 0) {
        return Err(Error::InvalidArgument(
            "alpha, eta and P must be positive".into(),
        ));
    }
    x_cur.ensure_len(x_prev.len())?;
    let mut m = x_prev.sub(x_cur);
    m.scale(1.0 / (alpha * eta * steps as f64));
    m.ensure_finite("inferred server momentum")?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub x_cur: ParamVec,
    pub x_prev: ParamVec,
    pub m_server: ParamVec,
    pub round: usize,
}

impl ServerState {
    pub fn new(x0: ParamVec) -> Self {
        ServerState {
            m_server: ParamVec::zeros(x0.len()),
            x_prev: x0.clone(),
            x_cur: x0,
            round: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub x_local: ParamVec,
    pub m_local: ParamVec,
}

/// Per-step record of one local round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRecord {
    /// `P + 1` models; entry 0 is taken after pre-fusion.
    pub models: Vec<ParamVec>,
    /// `P + 1` buffers; entry 0 is the initial buffer.
    pub momenta: Vec<ParamVec>,
    /// `P` sampled gradients.
    pub gradients: Vec<ParamVec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutput {
    /// `d = (1/P)Σ_p m_{p+1}`.
    pub update: ParamVec,
    pub state: ClientState,
    pub record: Option<LocalRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    /// One update per participant, in participant order.
    pub updates: Vec<ParamVec>,
    pub participants: Vec<usize>,
    pub floats_sent_up: u64,
    pub floats_sent_down: u64,
}

/// Runs `P` local steps for one client.
///
/// `grad(p, x)` returns the sampled gradient for step `p` at `x`. The client
/// must already hold the received server model and its initial buffer.
pub fn local_round(
    client: ClientState,
    cfg: &MethodConfig,
    m_server: &ParamVec,
    round: usize,
    mut grad: impl FnMut(usize, &ParamVec) -> Result<ParamVec>,
    record: bool,
) -> Result<LocalOutput> {
    let ClientState {
        client_id,
        mut x_local,
        mut m_local,
    } = client;
    let steps = cfg.local_steps;
    let dim = x_local.len();
    let diverged = |step| Error::Divergence {
        round,
        step,
        client: client_id,
    };

    if cfg.fusion == Fusion::Pre {
        x_local.sub_scaled(cfg.eta * cfg.beta * steps as f64, m_server);
    }
    let mut rec = record.then(|| LocalRecord {
        models: vec![x_local.clone()],
        momenta: vec![m_local.clone()],
        gradients: Vec::with_capacity(steps),
    });

    let mut d = ParamVec::zeros(dim);
    for p in 0..steps {
        let g = match grad(p, &x_local) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Err(diverged(p)),
            Err(e) => return Err(e),
        };
        g.ensure_len(dim)?;
        m_local.decay_add(cfg.mu_l, &g);
        x_local.sub_scaled(cfg.eta, &m_local);
        if cfg.fusion == Fusion::Intra {
            x_local.sub_scaled(cfg.eta * cfg.beta, m_server);
        }
        if !x_local.is_finite() || !m_local.is_finite() {
            return Err(diverged(p));
        }
        d.add_assign(&m_local);
        if let Some(rec) = rec.as_mut() {
            rec.models.push(x_local.clone());
            rec.momenta.push(m_local.clone());
            rec.gradients.push(g);
        }
    }
    d.scale(1.0 / steps as f64);

    Ok(LocalOutput {
        update: d,
        state: ClientState {
            client_id,
            x_local,
            m_local,
        },
        record: rec,
    })
}

/// `m ← μ_s m + mean(d)`, `x ← x − αηP m`.
pub fn server_round(
    server: &ServerState,
    results: &RoundResult,
    cfg: &MethodConfig,
) -> Result<ServerState> {
    if results.updates.is_empty() || results.participants.is_empty() {
        return Err(Error::InvalidArgument("round has no participants".into()));
    }
    if results.updates.len() != results.participants.len() {
        return Err(Error::InvalidArgument(format!(
            "{} updates for {} participants",
            results.updates.len(),
            results.participants.len()
        )));
    }
    let mean = ParamVec::mean(&results.updates);
    let mut m = server.m_server.clone();
    m.decay_add(cfg.mu_s, &mean);
    let mut x = server.x_cur.clone();
    x.sub_scaled(cfg.alpha * cfg.eta * cfg.local_steps as f64, &m);
    x.ensure_finite("server model")?;
    Ok(ServerState {
        x_prev: server.x_cur.clone(),
        x_cur: x,
        m_server: m,
        round: server.round + 1,
    })
}

/// `S` of `K` clients uniformly without replacement, ascending.
pub fn sample_participants(
    clients: usize,
    count: usize,
    rng: &mut Stream,
) -> Result<Vec<usize>> {
    if count == 0 || count > clients {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {count} of {clients} clients"
        )));
    }
    if count == clients {
        return Ok((0..clients).collect());
    }
    let mut ids = index::sample(rng, clients, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedopt::method_from_name;
    use crate::rng::{Purpose, StreamKey};

    fn scalar(v: f64) -> ParamVec {
        ParamVec::from_vec(vec![v])
    }

    fn cfg(mu_l: f64, steps: usize) -> MethodConfig {
        let mut c = method_from_name("fedavglm-z").unwrap();
        c.mu_l = mu_l;
        c.eta = 0.1;
        c.local_steps = steps;
        c
    }

    #[test]
    fn inferred_momentum_arithmetic() {
        let m = infer_server_momentum(&scalar(1.0), &scalar(0.8), 1.0, 0.1, 2).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);
        let z = infer_server_momentum(&scalar(3.0), &scalar(3.0), 1.0, 0.1, 2).unwrap();
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn hand_trace_of_local_round() {
        let client = ClientState {
            client_id: 0,
            x_local: scalar(1.0),
            m_local: scalar(0.0),
        };
        let out = local_round(client, &cfg(0.5, 2), &scalar(0.0), 0, |_, x| Ok(x.clone()), true)
            .unwrap();
        let rec = out.record.unwrap();
        assert!((rec.gradients[0][0] - 1.0).abs() < 1e-15);
        assert!((rec.models[1][0] - 0.9).abs() < 1e-15);
        assert!((rec.gradients[1][0] - 0.9).abs() < 1e-15);
        assert!((rec.momenta[2][0] - 1.4).abs() < 1e-15);
        assert!((rec.models[2][0] - 0.76).abs() < 1e-15);
        assert!((out.update[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn single_sgd_step() {
        let client = ClientState {
            client_id: 0,
            x_local: scalar(2.0),
            m_local: scalar(0.0),
        };
        let out =
            local_round(client, &cfg(0.0, 1), &scalar(0.0), 0, |_, _| Ok(scalar(3.0)), false).unwrap();
        assert_eq!(out.update[0], 3.0);
        assert!((out.state.x_local[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn divergence_names_the_step() {
        let client = ClientState {
            client_id: 3,
            x_local: scalar(1.0),
            m_local: scalar(0.0),
        };
        let err = local_round(
            client,
            &cfg(0.5, 4),
            &scalar(0.0),
            7,
            |p, _| Ok(scalar(if p == 2 { f64::INFINITY } else { 1.0 })),
            false,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Divergence {
                round: 7,
                step: 2,
                client: 3
            }
        ));
    }

    #[test]
    fn server_arithmetic_over_two_rounds() {
        let mut c = method_from_name("fedavgsm").unwrap();
        c.mu_s = 0.5;
        c.eta = 0.1;
        c.local_steps = 2;
        let s0 = ServerState::new(scalar(1.0));
        let results = RoundResult {
            updates: vec![scalar(2.0), scalar(2.0)],
            participants: vec![0, 1],
            floats_sent_up: 0,
            floats_sent_down: 0,
        };
        let s1 = server_round(&s0, &results, &c).unwrap();
        let s2 = server_round(&s1, &results, &c).unwrap();
        assert_eq!(s1.m_server[0], 2.0);
        assert_eq!(s2.m_server[0], 0.5 * 2.0 + 2.0);
        let expected = 1.0 - 0.1 * 2.0 * (2.0 + 3.0);
        assert!((s2.x_cur[0] - expected).abs() < 1e-12);
        let m = infer_server_momentum(&s1.x_cur, &s2.x_cur, c.alpha, c.eta, 2).unwrap();
        assert!((m[0] - s2.m_server[0]).abs() <= 1e-12 * s2.m_server[0].abs());
    }

    #[test]
    fn zero_updates_only_decay() {
        let mut c = method_from_name("fedavgsm").unwrap();
        c.mu_s = 0.5;
        let s = ServerState {
            x_cur: scalar(1.0),
            x_prev: scalar(1.2),
            m_server: scalar(4.0),
            round: 3,
        };
        let results = RoundResult {
            updates: vec![scalar(0.0)],
            participants: vec![0],
            floats_sent_up: 0,
            floats_sent_down: 0,
        };
        let next = server_round(&s, &results, &c).unwrap();
        assert_eq!(next.m_server[0], 2.0);
        assert_eq!(next.round, 4);
    }

    #[test]
    fn empty_round_rejected() {
        let c = method_from_name("fedavg").unwrap();
        let results = RoundResult {
            updates: vec![],
            participants: vec![],
            floats_sent_up: 0,
            floats_sent_down: 0,
        };
        assert!(server_round(&ServerState::new(scalar(0.0)), &results, &c).is_err());
    }

    #[test]
    fn participant_sampling() {
        let key = StreamKey::new(5, Purpose::Participants).round(3);
        assert_eq!(
            sample_participants(4, 4, &mut key.rng()).unwrap(),
            vec![0, 1, 2, 3]
        );
        let a = sample_participants(10, 3, &mut key.rng()).unwrap();
        let b = sample_participants(10, 3, &mut key.rng()).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_participants(4, 5, &mut key.rng()).is_err());
    }

    #[test]
    fn participant_frequencies_are_uniform() {
        let rounds = 10_000;
        let mut counts = [0usize; 4];
        for r in 0..rounds {
            let mut rng = StreamKey::new(11, Purpose::Participants).round(r).rng();
            counts[sample_participants(4, 1, &mut rng).unwrap()[0]] += 1;
        }
        let n = rounds as f64;
        let sd = (n * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n / 4.0).abs() <= 3.0 * sd, "{counts:?}");
        }
    }
}
