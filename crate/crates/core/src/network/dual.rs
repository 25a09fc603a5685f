use awb_tensor::{Real, RngStream};

use super::{Backbone, Checkpoint, ModelConfig};
use crate::error::{invalid, AwbError, CheckpointError, Result};
use crate::params::{ParamGroup, ParamRole};
use crate::registry::Registries;

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetRole {
    NetA,
    NetB,
    TeacherA,
    TeacherB,
}

impl NetRole {
    pub const ALL: [NetRole; 4] = [NetRole::NetA, NetRole::NetB, NetRole::TeacherA, NetRole::TeacherB];

    pub fn prefix(self) -> &'static str {
        match self {
            NetRole::NetA => "net_a",
            NetRole::NetB => "net_b",
            NetRole::TeacherA => "teacher_a",
            NetRole::TeacherB => "teacher_b",
        }
    }
}

/// Two students and their temporally averaged teachers.
#[derive(Clone, Debug)]
pub struct DualNetworks<T: Real> {
    pub net_a: Backbone<T>,
    pub net_b: Backbone<T>,
    pub teacher_a: Backbone<T>,
    pub teacher_b: Backbone<T>,
    pub ema_momentum: f64,
}

impl<T: Real> DualNetworks<T> {
    /// Students initialized from streams `(seed, 0)` and `(seed, 1)`; each
    /// teacher starts as a copy of its student.
    pub fn new(config: &ModelConfig, registries: &Registries<T>, seed: u64) -> Result<Self> {
        Self::from_streams(config, registries, [RngStream::new(seed, 0), RngStream::new(seed, 1)], seed)
    }

    /// Students initialized from explicit streams. Identical streams give
    /// identical students.
    pub fn from_streams(config: &ModelConfig, registries: &Registries<T>, init: [RngStream; 2], seed: u64) -> Result<Self> {
        let [mut ia, mut ib] = init;
        let net_a = Backbone::new(config, registries, &mut ia, &RngStream::new(seed, 100))?;
        let net_b = Backbone::new(config, registries, &mut ib, &RngStream::new(seed, 101))?;
        Ok(Self::from_students(net_a, net_b))
    }

    pub fn from_students(net_a: Backbone<T>, net_b: Backbone<T>) -> Self {
        Self { teacher_a: net_a.clone(), teacher_b: net_b.clone(), net_a, net_b, ema_momentum: DEFAULT_EMA_MOMENTUM }
    }

    pub fn get(&self, role: NetRole) -> &Backbone<T> {
        match role {
            NetRole::NetA => &self.net_a,
            NetRole::NetB => &self.net_b,
            NetRole::TeacherA => &self.teacher_a,
            NetRole::TeacherB => &self.teacher_b,
        }
    }

    pub fn get_mut(&mut self, role: NetRole) -> &mut Backbone<T> {
        match role {
            NetRole::NetA => &mut self.net_a,
            NetRole::NetB => &mut self.net_b,
            NetRole::TeacherA => &mut self.teacher_a,
            NetRole::TeacherB => &mut self.teacher_b,
        }
    }

    /// Average both students into their teachers.
    pub fn update_teachers(&mut self) -> Result<()> {
        ema_update(&mut self.teacher_a, &self.net_a, self.ema_momentum)?;
        ema_update(&mut self.teacher_b, &self.net_b, self.ema_momentum)
    }

    pub fn set_awb_active(&mut self, active: bool) {
        for r in NetRole::ALL {
            self.get_mut(r).set_awb_active(active);
        }
    }
}

/// `θ_t ← m·θ_t + (1−m)·θ_s` for weights; running statistics are copied.
pub fn ema_update<T: Real>(teacher: &mut Backbone<T>, student: &Backbone<T>, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(invalid!("EMA momentum must lie in [0,1), got {m}"));
    }
    if !teacher.store.same_layout(&student.store) {
        return Err(invalid!("teacher and student architectures differ"));
    }
    let (mt, ms) = (T::of(m), T::of(1.0 - m));
    let ids: Vec<_> = teacher.store.ids().collect();
    for id in ids {
        let src = student.store.entry(id);
        match src.role {
            ParamRole::Buffer => teacher.store.set(id, src.value.clone()),
            ParamRole::Weight => {
                for (t, s) in teacher.store.get_mut(id).data_mut().iter_mut().zip(src.value.data()) {
                    // Equal entries stay bit-identical (e.g. frozen weights).
                    if *t != *s {
                        *t = mt * *t + ms * *s;
                    }
                }
            }
        }
    }
    teacher.config.num_classes = student.config.num_classes;
    Ok(())
}

impl<T: Real> DualNetworks<T> {
    /// Snapshot all four networks, their wave stream positions and the
    /// caller's configuration and metadata.
    pub fn to_checkpoint(&self, config: Vec<(String, String)>, meta: Vec<(String, String)>) -> Checkpoint {
        let mut ck = Checkpoint { config, meta, ..Default::default() };
        ck.meta.push(("ema_momentum".into(), self.ema_momentum.to_string()));
        for role in NetRole::ALL {
            let net = self.get(role);
            for e in net.store.entries() {
                ck.tensors.push((format!("{}.{}", role.prefix(), e.name), e.value.cast()));
            }
            for (i, slot) in net.arch.slots.iter().enumerate() {
                ck.rng.push((format!("{}.slot{}", role.prefix(), i), slot.rng.state()));
            }
        }
        ck
    }

    /// Load parameters and stream states into networks built with the same
    /// architecture. Classifier widths follow the checkpoint.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let malformed = |m: String| -> AwbError { CheckpointError::Malformed(m).into() };
        if let Some(m) = ck.meta("ema_momentum") {
            self.ema_momentum = m.parse().map_err(|_| malformed(format!("bad ema_momentum {m:?}")))?;
        }
        let expected: usize = NetRole::ALL.iter().map(|&r| self.get(r).store.len()).sum();
        if ck.tensors.len() != expected {
            return Err(malformed(format!("checkpoint holds {} tensors, model has {}", ck.tensors.len(), expected)));
        }
        for role in NetRole::ALL {
            let net = self.get_mut(role);
            let classifier = net.arch.classifier().weight;
            let ids: Vec<_> = net.store.ids().collect();
            for id in ids {
                let name = format!("{}.{}", role.prefix(), net.store.entry(id).name);
                let t = ck.tensor(&name).ok_or_else(|| malformed(format!("missing tensor {name}")))?;
                if id == classifier {
                    net.reset_classifier(t.cast())?;
                } else if t.shape() != net.store.get(id).shape() {
                    return Err(malformed(format!(
                        "tensor {name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        net.store.get(id).shape()
                    )));
                } else {
                    net.store.set(id, t.cast());
                }
            }
            for (i, slot) in net.arch.slots.iter_mut().enumerate() {
                let name = format!("{}.slot{}", role.prefix(), i);
                let state = ck.rng(&name).ok_or_else(|| malformed(format!("missing stream {name}")))?;
                slot.rng = RngStream::from_state(state);
            }
        }
        Ok(())
    }

    /// Seed all four networks from a checkpoint taken with a possibly
    /// different attention layout: tensors are matched by name, attention
    /// weights absent from the checkpoint keep their initial values, and
    /// wave streams are left untouched. Returns how many tensors were left
    /// at initialization.
    pub fn restore_matching(&mut self, ck: &Checkpoint) -> Result<usize> {
        let malformed = |m: String| -> AwbError { CheckpointError::Malformed(m).into() };
        let mut kept = 0;
        for role in NetRole::ALL {
            let net = self.get_mut(role);
            let classifier = net.arch.classifier().weight;
            let ids: Vec<_> = net.store.ids().collect();
            for id in ids {
                let entry = net.store.entry(id);
                let name = format!("{}.{}", role.prefix(), entry.name);
                match ck.tensor(&name) {
                    Some(t) if id == classifier => net.reset_classifier(t.cast())?,
                    Some(t) if t.shape() == net.store.get(id).shape() => net.store.set(id, t.cast()),
                    Some(t) => {
                        return Err(malformed(format!(
                            "tensor {name} has shape {:?}, model expects {:?}",
                            t.shape(),
                            net.store.get(id).shape()
                        )))
                    }
                    None if entry.group == ParamGroup::Attention => kept += 1,
                    None => return Err(malformed(format!("missing tensor {name}"))),
                }
            }
        }
        Ok(kept)
    }
}
