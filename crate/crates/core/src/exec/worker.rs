//! Worker event loop: owns one environment and serves wire requests.

use super::wire::{Reply, Request, CODE_PROTOCOL, CODE_UNEXPECTED};
use crate::env::{make_env, Environment, Info, StepPadding};
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io;
use std::time::Duration;

/// INIT payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerInit {
    pub env: String,
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub padding: StepPadding,
    pub n_s: u32,
    pub index: usize,
    /// Upper bound of a uniform random sleep before every STEP reply.
    #[serde(default)]
    pub delay_max_ms: u64,
    #[serde(default)]
    pub delay_seed: u64,
}

/// Bidirectional frame pipe seen from the worker side.
pub trait Link {
    /// Next whole frame, `None` once the driver is gone.
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>>;
    fn send(&mut self, frame: Vec<u8>) -> io::Result<()>;
}

struct Hosted {
    env: Box<dyn Environment>,
    n_s: u32,
    base_seed: u64,
    episodes: u64,
    options: Info,
    clock: u64,
    delay_max_ms: u64,
    delay_rng: SimRng,
}

impl Hosted {
    fn step(&mut self, action: &[f64]) -> Reply {
        self.clock += 1;
        let mut reward = 0.0;
        let mut last = None;
        let mut substeps = 0u32;
        for _ in 0..self.n_s {
            match self.env.step(action) {
                Ok(r) => {
                    reward += r.reward;
                    substeps += 1;
                    let done = r.done();
                    last = Some(r);
                    if done {
                        break;
                    }
                }
                Err(e) => return err(e.code(), e.to_string()),
            }
        }
        let mut r = last.expect("n_s >= 1");
        if r.done() {
            r.info.insert(
                "final_observation".into(),
                Value::Array(r.observation.iter().map(|x| json_f64(*x)).collect()),
            );
            self.episodes += 1;
            let seed = derive_seed(self.base_seed, self.episodes);
            match self.env.reset(seed, &self.options) {
                Ok(obs) => r.observation = obs,
                Err(e) => return err(e.code(), format!("auto-reset: {e}")),
            }
        }
        r.info.insert("worker_clock".into(), Value::from(self.clock));
        r.info.insert("substeps".into(), Value::from(substeps));
        if self.delay_max_ms > 0 {
            let us = self.delay_rng.random_range(0..=self.delay_max_ms * 1000);
            std::thread::sleep(Duration::from_micros(us));
        }
        Reply::StepRes {
            observation: r.observation,
            reward,
            terminated: r.terminated,
            truncated: r.truncated,
            info: r.info,
        }
    }
}

fn json_f64(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

fn err(code: u32, message: String) -> Reply {
    Reply::Err { code, message }
}

fn init(v: Value, expect_env: Option<&str>) -> Result<Hosted, Reply> {
    let init: WorkerInit =
        serde_json::from_value(v).map_err(|e| err(CODE_PROTOCOL, format!("INIT payload: {e}")))?;
    if let Some(want) = expect_env {
        if want != init.env {
            return Err(err(
                CODE_UNEXPECTED,
                format!("worker launched for `{want}`, driver requested `{}`", init.env),
            ));
        }
    }
    if init.n_s == 0 {
        return Err(err(CODE_PROTOCOL, "n_s must be >= 1".into()));
    }
    let env = make_env(&init.env, &init.config, init.padding).map_err(|e| err(e.code(), e.to_string()))?;
    Ok(Hosted {
        env,
        n_s: init.n_s,
        base_seed: 0,
        episodes: 0,
        options: Info::new(),
        clock: 0,
        delay_max_ms: init.delay_max_ms,
        delay_rng: rng_from_seed(derive_seed(init.delay_seed, init.index as u64)),
    })
}

/// Serves requests until CLOSE or until the link drops. When `expect_env`
/// is given, an INIT for any other environment is refused.
pub fn serve<L: Link>(link: &mut L, expect_env: Option<&str>) -> io::Result<()> {
    let mut hosted: Option<Hosted> = None;
    while let Some(frame) = link.recv()? {
        let req = match Request::decode(&frame) {
            Ok(r) => r,
            Err(e) => {
                link.send(err(CODE_PROTOCOL, e.to_string()).encode().expect("small frame"))?;
                continue;
            }
        };
        let reply = match (req, hosted.as_mut()) {
            (Request::Close, _) => return Ok(()),
            (Request::Init(_), Some(_)) => err(CODE_UNEXPECTED, "already initialized".into()),
            (Request::Init(v), None) => match init(v, expect_env) {
                Ok(h) => {
                    hosted = Some(h);
                    Reply::Ready
                }
                Err(reply) => reply,
            },
            (_, None) => err(CODE_UNEXPECTED, "INIT required first".into()),
            (Request::Reset { seed, options }, Some(h)) => match h.env.reset(seed, &options) {
                Ok(obs) => {
                    h.base_seed = seed;
                    h.episodes = 0;
                    h.options = options;
                    Reply::ResetRes(obs)
                }
                Err(e) => err(e.code(), e.to_string()),
            },
            (Request::Step(_), Some(h)) if !h.env.is_active() => {
                err(CODE_UNEXPECTED, "STEP before RESET".into())
            }
            (Request::Step(a), Some(h)) => h.step(&a),
        };
        let frame = match reply.encode() {
            Ok(f) => f,
            Err(e) => err(CODE_PROTOCOL, format!("reply too large: {e}")).encode().expect("small frame"),
        };
        link.send(frame)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    struct Script {
        inbox: VecDeque<Vec<u8>>,
        outbox: Vec<Reply>,
    }

    impl Link for Script {
        fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
            Ok(self.inbox.pop_front())
        }
        fn send(&mut self, frame: Vec<u8>) -> io::Result<()> {
            self.outbox.push(Reply::decode(&frame).unwrap());
            Ok(())
        }
    }

    fn run(reqs: Vec<Request>) -> Vec<Reply> {
        let mut s = Script {
            inbox: reqs.iter().map(|r| r.encode().unwrap()).collect(),
            outbox: vec![],
        };
        serve(&mut s, None).unwrap();
        s.outbox
    }

    fn init_req(n_s: u32) -> Request {
        Request::Init(serde_json::json!({"env": "tracker", "n_s": n_s, "index": 0}))
    }

    #[test]
    fn requires_init_then_reset() {
        let out = run(vec![Request::Step(vec![0.0; 12]), init_req(1), Request::Step(vec![0.0; 12])]);
        assert!(matches!(out[0], Reply::Err { code: CODE_UNEXPECTED, .. }));
        assert_eq!(out[1], Reply::Ready);
        assert!(matches!(out[2], Reply::Err { code: CODE_UNEXPECTED, .. }));
    }

    #[test]
    fn unknown_env_reports_code() {
        let out = run(vec![Request::Init(serde_json::json!({"env": "nope", "n_s": 1, "index": 0}))]);
        assert!(matches!(out[0], Reply::Err { code: 17, .. }));
    }

    #[test]
    fn garbage_frame_gets_protocol_error() {
        let mut s = Script {
            inbox: VecDeque::from([vec![1, 0, 0, 0, 0x42]]),
            outbox: vec![],
        };
        serve(&mut s, None).unwrap();
        assert!(matches!(s.outbox[0], Reply::Err { code: CODE_PROTOCOL, .. }));
    }

    #[test]
    fn close_stops_the_loop() {
        let out = run(vec![init_req(1), Request::Close, Request::Reset { seed: 1, options: Info::new() }]);
        assert_eq!(out, vec![Reply::Ready]);
    }

    #[test]
    fn substeps_sum_rewards_and_report_clock() {
        let out = run(vec![
            init_req(3),
            Request::Reset { seed: 2, options: Info::new() },
            Request::Step(vec![0.1; 12]),
            Request::Step(vec![0.1; 12]),
        ]);
        let mut serial = make_env("tracker", &Value::Null, StepPadding::default()).unwrap();
        serial.reset(2, &Info::new()).unwrap();
        let want: f64 = (0..3).map(|_| serial.step(&[0.1; 12]).unwrap().reward).sum();
        match &out[2] {
            Reply::StepRes { reward, info, .. } => {
                assert_eq!(*reward, want);
                assert_eq!(info["worker_clock"], Value::from(1));
                assert_eq!(info["substeps"], Value::from(3));
            }
            other => panic!("{other:?}"),
        }
        match &out[3] {
            Reply::StepRes { info, .. } => assert_eq!(info["worker_clock"], Value::from(2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn episode_end_auto_resets_with_derived_seed() {
        let lander = Request::Init(serde_json::json!({"env": "lander", "n_s": 1, "index": 0}));
        let out = run(vec![lander, Request::Reset { seed: 5, options: Info::new() }, Request::Step(vec![0.0])]);
        let mut serial = make_env("lander", &Value::Null, StepPadding::default()).unwrap();
        serial.reset(5, &Info::new()).unwrap();
        let last = serial.step(&[0.0]).unwrap();
        let fresh = serial.reset(derive_seed(5, 1), &Info::new()).unwrap();
        match &out[2] {
            Reply::StepRes { observation, terminated, info, .. } => {
                assert!(*terminated);
                assert_eq!(observation, &fresh);
                let fin: Vec<f64> = serde_json::from_value(info["final_observation"].clone()).unwrap();
                assert_eq!(fin, last.observation);
            }
            other => panic!("{other:?}"),
        }
    }
}
