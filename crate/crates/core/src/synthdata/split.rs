use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "video_level")]
    VideoLevel,
    #[serde(rename = "frame_level_80_20")]
    FrameLevel8020,
    #[serde(rename = "leave_one_out")]
    LeaveOneOut,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::VideoLevel => "video_level",
            Protocol::FrameLevel8020 => "frame_level_80_20",
            Protocol::LeaveOneOut => "leave_one_out",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video_level" => Ok(Protocol::VideoLevel),
            "frame_level_80_20" => Ok(Protocol::FrameLevel8020),
            "leave_one_out" => Ok(Protocol::LeaveOneOut),
            other => Err(Error::invalid(format!(
                "unknown protocol `{other}` (expected video_level, frame_level_80_20, or leave_one_out)"
            ))),
        }
    }
}

/// A frame of an annotated video, by index into `Corpus::annotated`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameRef {
    pub video: usize,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub protocol: Protocol,
    /// `video_level`, `frame_level_80_20`, or `loo_<val video id>`.
    pub name: String,
    pub train: Vec<FrameRef>,
    pub val: Vec<FrameRef>,
    pub test: Vec<FrameRef>,
}

impl SplitPlan {
    pub fn part(&self, role: Role) -> &[FrameRef] {
        match role {
            Role::Train => &self.train,
            Role::Val => &self.val,
            Role::Test => &self.test,
        }
    }
}

fn whole(corpus: &Corpus, video: usize) -> impl Iterator<Item = FrameRef> {
    (0..corpus.annotated[video].frames.len()).map(move |frame| FrameRef { video, frame })
}

/// Split plans for `protocol`: one plan, or one per held-out validation
/// video under leave-one-out. The test video is the same in every plan.
pub fn make_split(corpus: &Corpus, protocol: Protocol) -> Result<Vec<SplitPlan>> {
    let test_video = corpus.test_video();
    let test: Vec<FrameRef> = whole(corpus, test_video).collect();
    match protocol {
        Protocol::VideoLevel => {
            let pick = |role: Role| -> Vec<FrameRef> {
                (0..corpus.annotated.len())
                    .filter(|&v| corpus.roles[v] == role)
                    .flat_map(|v| whole(corpus, v))
                    .collect()
            };
            Ok(vec![SplitPlan {
                protocol,
                name: protocol.as_str().into(),
                train: pick(Role::Train),
                val: pick(Role::Val),
                test,
            }])
        }
        Protocol::FrameLevel8020 => {
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for v in (0..corpus.annotated.len()).filter(|&v| v != test_video) {
                let n = corpus.annotated[v].frames.len();
                let cut = n * 4 / 5;
                for r in whole(corpus, v) {
                    if r.frame < cut {
                        train.push(r);
                    } else {
                        val.push(r);
                    }
                }
            }
            Ok(vec![SplitPlan {
                protocol,
                name: protocol.as_str().into(),
                train,
                val,
                test,
            }])
        }
        Protocol::LeaveOneOut => Ok(leave_one_out(corpus)),
    }
}

/// Every non-test video takes one turn as validation; the rest train.
pub fn leave_one_out(corpus: &Corpus) -> Vec<SplitPlan> {
    let test_video = corpus.test_video();
    let others: Vec<usize> = (0..corpus.annotated.len()).filter(|&v| v != test_video).collect();
    others
        .iter()
        .map(|&held| SplitPlan {
            protocol: Protocol::LeaveOneOut,
            name: format!("loo_{}", corpus.annotated[held].video_id),
            train: others.iter().filter(|&&v| v != held).flat_map(|&v| whole(corpus, v)).collect(),
            val: whole(corpus, held).collect(),
            test: whole(corpus, test_video).collect(),
        })
        .collect()
}
