//! Proof-of-Verifying consensus: miner election with deposits and votes,
//! per-round leader/verifier roles, quality gating of compressed updates,
//! cross-verification, strict >2/3 block commits, slashing, and rotation.
//!
//! The state machine is deliberately synchronous per subchain: the event
//! simulator delivers messages, this module decides. All randomness comes
//! from the federation seed, so a round's outcome is a pure function of the
//! updates, the fault script, and the seed.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;

use crate::codec::{Reader, Writer};
use crate::compress::{aggregate_sparse, SparseGradient};
use crate::data::Dataset;
use crate::error::{CoreError, CoreResult};
use crate::ledger::{Block, BlockPayload, Digest32, SubchainState, TrainingPayload};
use crate::model::{evaluate_accuracy, sgd_step, GradientVector, ModelParameters, ModelSpec};
use crate::rng::derive_rng;
use crate::sign::{Authority, EntityId, Identity, Signature};

/// Lifecycle status of a miner within one federation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinerStatus {
    Candidate,
    Delegate,
    Leader,
    Verifier,
    Slashed,
}

/// A miner's consensus-facing state.
#[derive(Debug, Clone, PartialEq)]
pub struct MinerState {
    pub identity: Identity,
    pub deposit: u64,
    pub votes: u32,
    pub status: MinerStatus,
}

impl MinerState {
    pub fn candidate(identity: Identity, deposit: u64) -> Self {
        Self { identity, deposit, votes: 0, status: MinerStatus::Candidate }
    }

    pub fn id(&self) -> &EntityId {
        &self.identity.entity_id
    }
}

/// A worker's signed compressed update for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub worker_id: EntityId,
    pub round: u32,
    pub sparse: SparseGradient,
    pub signature: Signature,
    pub timestamp_ms: u64,
}

impl LocalUpdate {
    pub fn signing_bytes(worker_id: &EntityId, round: u32, sparse: &SparseGradient, timestamp_ms: u64) -> Vec<u8> {
        let mut w = Writer::new();
        w.str(worker_id.as_str());
        w.u32(round);
        w.bytes(&sparse.encode());
        w.u64(timestamp_ms);
        w.finish()
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.str(self.worker_id.as_str());
        w.u32(self.round);
        w.bytes(&self.sparse.encode());
        w.u64(self.timestamp_ms);
        w.raw(&self.signature.0);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn decode(r: &mut Reader<'_>) -> CoreResult<Self> {
        Ok(Self {
            worker_id: EntityId::new(r.str()?),
            round: r.u32()?,
            sparse: SparseGradient::decode(r.bytes()?)?,
            timestamp_ms: r.u64()?,
            signature: Signature(r.array()?),
        })
    }

    /// Signature check against the worker's registered key.
    pub fn verify(&self, authority: &Authority) -> bool {
        let bytes = Self::signing_bytes(&self.worker_id, self.round, &self.sparse, self.timestamp_ms);
        authority.verify(&self.worker_id, &bytes, &self.signature)
    }
}

/// A verifier's signed verdict set plus per-peer agreement bits.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifierResponse {
    pub verifier_id: EntityId,
    pub round: u32,
    /// Worker ids whose updates this verifier deems qualified.
    pub qualified: BTreeSet<EntityId>,
    /// Agreement bit per peer verifier (true = identical qualified set).
    pub comparison: Vec<(EntityId, bool)>,
    pub signature: Signature,
    pub timestamp_ms: u64,
}

impl VerifierResponse {
    pub fn signing_bytes(
        verifier_id: &EntityId,
        round: u32,
        qualified: &BTreeSet<EntityId>,
        comparison: &[(EntityId, bool)],
        timestamp_ms: u64,
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.str(verifier_id.as_str());
        w.u32(round);
        w.u32(qualified.len() as u32);
        for id in qualified {
            w.str(id.as_str());
        }
        w.u32(comparison.len() as u32);
        for (id, agree) in comparison {
            w.str(id.as_str());
            w.u8(u8::from(*agree));
        }
        w.u64(timestamp_ms);
        w.finish()
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.str(self.verifier_id.as_str());
        w.u32(self.round);
        w.u32(self.qualified.len() as u32);
        for id in &self.qualified {
            w.str(id.as_str());
        }
        w.u32(self.comparison.len() as u32);
        for (id, agree) in &self.comparison {
            w.str(id.as_str());
            w.u8(u8::from(*agree));
        }
        w.u64(self.timestamp_ms);
        w.raw(&self.signature.0);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn decode(r: &mut Reader<'_>) -> CoreResult<Self> {
        let verifier_id = EntityId::new(r.str()?);
        let round = r.u32()?;
        let mut qualified = BTreeSet::new();
        for _ in 0..r.u32()? {
            if !qualified.insert(EntityId::new(r.str()?)) {
                return Err(CoreError::Decode("duplicate id in qualified set".to_string()));
            }
        }
        let mut comparison = Vec::new();
        for _ in 0..r.u32()? {
            let id = EntityId::new(r.str()?);
            let agree = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(CoreError::Decode("non-canonical agreement bit".to_string())),
            };
            comparison.push((id, agree));
        }
        let timestamp_ms = r.u64()?;
        let signature = Signature(r.array()?);
        Ok(Self { verifier_id, round, qualified, comparison, signature, timestamp_ms })
    }

    pub fn verify(&self, authority: &Authority) -> bool {
        let bytes = Self::signing_bytes(&self.verifier_id, self.round, &self.qualified, &self.comparison, self.timestamp_ms);
        authority.verify(&self.verifier_id, &bytes, &self.signature)
    }
}

/// Why a miner lost its deposit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlashReason {
    /// Disagreed with the honest majority verdict for R consecutive responses.
    FalseVerification,
    /// Proposed a block it had no right to, or a malformed one.
    InvalidProposal,
    /// Signed two conflicting responses for the same round.
    Equivocation,
}

impl SlashReason {
    fn code(self) -> u8 {
        match self {
            SlashReason::FalseVerification => 0,
            SlashReason::InvalidProposal => 1,
            SlashReason::Equivocation => 2,
        }
    }

    fn from_code(code: u8) -> CoreResult<Self> {
        match code {
            0 => Ok(SlashReason::FalseVerification),
            1 => Ok(SlashReason::InvalidProposal),
            2 => Ok(SlashReason::Equivocation),
            _ => Err(CoreError::Decode("unknown slash reason".to_string())),
        }
    }
}

/// On-chain record of a slashing event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlashRecord {
    pub miner_id: EntityId,
    pub reason: SlashReason,
    pub round: u32,
}

impl SlashRecord {
    pub fn encode_into(&self, w: &mut Writer) {
        w.str(self.miner_id.as_str());
        w.u8(self.reason.code());
        w.u32(self.round);
    }

    pub fn decode(r: &mut Reader<'_>) -> CoreResult<Self> {
        Ok(Self {
            miner_id: EntityId::new(r.str()?),
            reason: SlashReason::from_code(r.u8()?)?,
            round: r.u32()?,
        })
    }
}

/// Quality gate supplied by the task publisher.
#[derive(Debug, Clone)]
pub struct QualityPolicy {
    /// Maximum allowed test-accuracy drop relative to the current global model.
    pub theta: f64,
    pub test_set: Dataset,
}

impl QualityPolicy {
    pub fn validate(&self) -> CoreResult<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(CoreError::InvalidConfig("theta must be in [0, 1]".to_string()));
        }
        Ok(())
    }
}

/// The elected delegate committee for one subchain.
#[derive(Debug, Clone)]
pub struct Committee {
    members: Vec<MinerState>,
    leader: EntityId,
    /// Consecutive disagreeing responses per miner.
    streaks: BTreeMap<EntityId, u32>,
}

/// Top-n election by votes (ties to the lexicographically smaller id), with a
/// deposit floor; the first leader is a seeded random delegate.
pub fn elect_delegates(
    candidates: &[MinerState],
    worker_votes: &BTreeMap<EntityId, Vec<EntityId>>,
    committee_size: usize,
    min_deposit: u64,
    seed: u64,
) -> CoreResult<Committee> {
    if committee_size == 0 {
        return Err(CoreError::InvalidConfig("committee size must be positive".to_string()));
    }
    let mut tally: BTreeMap<EntityId, u32> = BTreeMap::new();
    for choices in worker_votes.values() {
        for c in choices {
            *tally.entry(c.clone()).or_insert(0) += 1;
        }
    }
    let mut eligible: Vec<MinerState> = candidates
        .iter()
        .filter(|c| c.deposit >= min_deposit)
        .cloned()
        .collect();
    if eligible.len() < committee_size {
        return Err(CoreError::FederationHalt(format!(
            "only {} of {} candidates meet the deposit floor; need {committee_size}",
            eligible.len(),
            candidates.len()
        )));
    }
    for m in &mut eligible {
        m.votes = tally.get(m.id()).copied().unwrap_or(0);
    }
    eligible.sort_by(|a, b| b.votes.cmp(&a.votes).then_with(|| a.id().cmp(b.id())));
    eligible.truncate(committee_size);
    for m in &mut eligible {
        m.status = MinerStatus::Verifier;
    }
    let mut rng = derive_rng(seed, "leader-rotation", &[0]);
    let leader_idx = rng.random_range(0..eligible.len());
    eligible[leader_idx].status = MinerStatus::Leader;
    let leader = eligible[leader_idx].id().clone();
    Ok(Committee { members: eligible, leader, streaks: BTreeMap::new() })
}

impl Committee {
    pub fn members(&self) -> &[MinerState] {
        &self.members
    }

    pub fn leader(&self) -> &EntityId {
        &self.leader
    }

    /// Delegates still standing (not slashed).
    pub fn active(&self) -> impl Iterator<Item = &MinerState> {
        self.members.iter().filter(|m| m.status != MinerStatus::Slashed)
    }

    /// This round's verifiers: active delegates excluding the leader.
    pub fn verifiers(&self) -> Vec<EntityId> {
        self.active()
            .filter(|m| m.id() != &self.leader)
            .map(|m| m.id().clone())
            .collect()
    }

    pub fn is_active(&self, id: &EntityId) -> bool {
        self.members
            .iter()
            .any(|m| m.id() == id && m.status != MinerStatus::Slashed)
    }

    /// Confiscates the deposit and ejects the miner; idempotent. Returns the
    /// record to put on chain, or `None` when already slashed.
    pub fn slash(&mut self, id: &EntityId, reason: SlashReason, round: u32) -> Option<SlashRecord> {
        let member = self.members.iter_mut().find(|m| m.id() == id)?;
        if member.status == MinerStatus::Slashed {
            return None;
        }
        member.status = MinerStatus::Slashed;
        member.deposit = 0;
        self.streaks.remove(id);
        Some(SlashRecord { miner_id: id.clone(), reason, round })
    }

    /// Seeded leader rotation over the surviving delegates; deterministic in
    /// `(seed, round)`.
    pub fn rotate_roles(&mut self, seed: u64, round: u32) -> CoreResult<()> {
        let active: Vec<EntityId> = self.active().map(|m| m.id().clone()).collect();
        if active.is_empty() {
            return Err(CoreError::FederationHalt("no active delegates remain".to_string()));
        }
        let mut rng = derive_rng(seed, "leader-rotation", &[round as u64]);
        let next = active[rng.random_range(0..active.len())].clone();
        for m in &mut self.members {
            if m.status == MinerStatus::Slashed {
                continue;
            }
            m.status = if m.id() == &next { MinerStatus::Leader } else { MinerStatus::Verifier };
        }
        self.leader = next;
        Ok(())
    }

    /// Records whether each responding verifier agreed with the majority
    /// verdict this round; non-responders keep their streak. Returns miners
    /// whose streak reached `threshold`.
    pub fn note_disagreements(
        &mut self,
        verdicts: &[(EntityId, bool)],
        threshold: u32,
    ) -> Vec<EntityId> {
        let mut due = Vec::new();
        for (id, disagreed) in verdicts {
            if !self.is_active(id) {
                continue;
            }
            let streak = self.streaks.entry(id.clone()).or_insert(0);
            if *disagreed {
                *streak += 1;
                if *streak >= threshold {
                    due.push(id.clone());
                }
            } else {
                *streak = 0;
            }
        }
        due
    }
}

/// Quality check for one update, reusing a precomputed baseline accuracy of
/// the current global model.
pub fn evaluate_update_with_baseline(
    spec: ModelSpec,
    update: &LocalUpdate,
    global: &ModelParameters,
    baseline_accuracy: f64,
    policy: &QualityPolicy,
    learning_rate: f64,
    authority: &Authority,
) -> CoreResult<(bool, f64)> {
    policy.validate()?;
    if !update.verify(authority) {
        return Err(CoreError::InvalidSignature(update.worker_id.as_str().to_string()));
    }
    let candidate = sgd_step(global, &update.sparse.densify(), learning_rate)?;
    let accuracy = evaluate_accuracy(spec, &candidate, &policy.test_set.all())?;
    Ok((accuracy >= baseline_accuracy - policy.theta, accuracy))
}

/// Quality check computing the baseline itself.
pub fn evaluate_update(
    spec: ModelSpec,
    update: &LocalUpdate,
    global: &ModelParameters,
    policy: &QualityPolicy,
    learning_rate: f64,
    authority: &Authority,
) -> CoreResult<(bool, f64)> {
    let baseline = evaluate_accuracy(spec, global, &policy.test_set.all())?;
    evaluate_update_with_baseline(spec, update, global, baseline, policy, learning_rate, authority)
}

/// Cross-verification outcome: per-update approval tallies and per-verifier
/// disagreement scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossVerification {
    pub approvals: BTreeMap<EntityId, u32>,
    pub disagreement: BTreeMap<EntityId, u32>,
}

/// Tallies approvals per update and counts, for every verifier, how many
/// peer bits differ from its own. Duplicate responses (same verifier) are
/// ignored after the first.
pub fn cross_verify(responses: &[VerifierResponse], update_ids: &[EntityId]) -> CrossVerification {
    let mut unique: BTreeMap<EntityId, &VerifierResponse> = BTreeMap::new();
    for r in responses {
        unique.entry(r.verifier_id.clone()).or_insert(r);
    }
    let mut approvals: BTreeMap<EntityId, u32> = BTreeMap::new();
    for u in update_ids {
        approvals.insert(u.clone(), 0);
    }
    for r in unique.values() {
        for u in update_ids {
            if r.qualified.contains(u) {
                *approvals.get_mut(u).expect("seeded above") += 1;
            }
        }
    }
    let mut disagreement: BTreeMap<EntityId, u32> = BTreeMap::new();
    for (vid, r) in &unique {
        let mut score = 0u32;
        for (pid, p) in &unique {
            if pid == vid {
                continue;
            }
            for u in update_ids {
                if r.qualified.contains(u) != p.qualified.contains(u) {
                    score += 1;
                }
            }
        }
        disagreement.insert(vid.clone(), score);
    }
    CrossVerification { approvals, disagreement }
}

/// What became of one round's assembly.
#[derive(Debug, Clone, PartialEq)]
pub enum CommitDecision {
    Committed { block_height: u64, qualified: Vec<EntityId> },
    /// Not enough verifiers agreed on the pending block.
    Failed { approving: u32, verifier_count: u32 },
}

/// Leader-side assembly: the pending block holds every update approved by a
/// strict majority of verifiers plus all responses; it commits iff strictly
/// more than 2/3 of the verifier set report that same qualified set.
#[allow(clippy::too_many_arguments)]
pub fn assemble_and_commit(
    leader: &EntityId,
    committee: &Committee,
    round: u32,
    updates: &BTreeMap<EntityId, LocalUpdate>,
    responses: &[VerifierResponse],
    tallies: &CrossVerification,
    slashes: Vec<SlashRecord>,
    global_model_digest: Digest32,
    subchain: &mut SubchainState,
    timestamp_ms: u64,
    authority: &Authority,
) -> CoreResult<CommitDecision> {
    if committee.leader() != leader {
        return Err(CoreError::ProtocolViolation(format!(
            "{leader} assembled a block but {} holds the leader role",
            committee.leader()
        )));
    }
    let verifier_count = committee.verifiers().len() as u32;

    // Strict majority of the verifier set per update.
    let mut qualified: Vec<EntityId> = tallies
        .approvals
        .iter()
        .filter(|(_, &count)| 2 * count > verifier_count)
        .map(|(id, _)| id.clone())
        .collect();
    qualified.sort();
    let qualified_set: BTreeSet<EntityId> = qualified.iter().cloned().collect();

    // A verifier approves the pending block iff its own verdict set matches
    // the block's content exactly.
    let mut seen: BTreeSet<EntityId> = BTreeSet::new();
    let mut approving = 0u32;
    for r in responses {
        if seen.insert(r.verifier_id.clone()) && r.qualified == qualified_set {
            approving += 1;
        }
    }
    // Strictly more than 2/3 of the verifier set.
    if 3 * approving <= 2 * verifier_count {
        return Ok(CommitDecision::Failed { approving, verifier_count });
    }

    let mut block_updates = Vec::with_capacity(qualified.len());
    for id in &qualified {
        let u = updates.get(id).ok_or_else(|| {
            CoreError::ProtocolViolation(format!("qualified update {id} missing from leader inbox"))
        })?;
        block_updates.push(u.clone());
    }
    let mut ordered_responses = responses.to_vec();
    ordered_responses.sort_by(|a, b| a.verifier_id.cmp(&b.verifier_id));
    ordered_responses.dedup_by(|a, b| a.verifier_id == b.verifier_id);

    let payload = TrainingPayload {
        round,
        updates: block_updates,
        responses: ordered_responses,
        slashes,
        global_model_digest,
    };
    let block = subchain.append_block(BlockPayload::Training(payload), leader, timestamp_ms, authority)?;
    Ok(CommitDecision::Committed { block_height: block.height, qualified })
}

/// Global step from a committed block: average the qualified sparse updates,
/// then one SGD step. Zero qualified updates leave the model untouched.
pub fn compute_global_update(
    block: &Block,
    global: &ModelParameters,
    learning_rate: f64,
) -> CoreResult<ModelParameters> {
    let payload = match &block.payload {
        BlockPayload::Training(p) => p,
        _ => return Err(CoreError::Ledger("not a training block".to_string())),
    };
    if payload.updates.is_empty() {
        return Ok(global.clone());
    }
    let sparse: Vec<SparseGradient> = payload.updates.iter().map(|u| u.sparse.clone()).collect();
    let sum = aggregate_sparse(&sparse, global.dim() as u32)?;
    let scale = 1.0 / payload.updates.len() as f64;
    let mean = GradientVector::new(sum.values().iter().map(|v| v * scale).collect())?;
    sgd_step(global, &mean, learning_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobsSpec};
    use crate::ledger::ChainKind;
    use crate::sign::Role;
    use proptest::prelude::*;

    fn miner(auth: &mut Authority, name: &str, deposit: u64) -> MinerState {
        let cred = auth.register(name.into(), Role::Miner).unwrap();
        MinerState::candidate(cred.identity, deposit)
    }

    fn votes_for(entries: &[(&str, &[&str])]) -> BTreeMap<EntityId, Vec<EntityId>> {
        entries
            .iter()
            .map(|(w, cs)| (EntityId::new(*w), cs.iter().map(|c| EntityId::new(*c)).collect()))
            .collect()
    }

    #[test]
    fn election_takes_top_votes() {
        let mut auth = Authority::new(1);
        let candidates: Vec<MinerState> =
            ["a", "b", "c"].iter().map(|n| miner(&mut auth, n, 10)).collect();
        // a:5 votes, b:3, c:1
        let votes = votes_for(&[
            ("w0", &["a", "b"]),
            ("w1", &["a", "b"]),
            ("w2", &["a", "b"]),
            ("w3", &["a", "c"]),
            ("w4", &["a"]),
        ]);
        let committee = elect_delegates(&candidates, &votes, 2, 1, 7).unwrap();
        let ids: Vec<&str> = committee.members().iter().map(|m| m.id().as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(committee.members()[0].votes, 5);
    }

    #[test]
    fn election_tie_breaks_to_smaller_id() {
        let mut auth = Authority::new(2);
        let candidates: Vec<MinerState> =
            ["beta", "alpha"].iter().map(|n| miner(&mut auth, n, 10)).collect();
        let votes = votes_for(&[("w0", &["alpha", "beta"]), ("w1", &["beta", "alpha"])]);
        let committee = elect_delegates(&candidates, &votes, 1, 1, 7).unwrap();
        assert_eq!(committee.members()[0].id().as_str(), "alpha");
    }

    #[test]
    fn election_matches_sort_oracle_at_desk_scale() {
        // 22 candidates, committee of 11.
        let mut auth = Authority::new(3);
        let candidates: Vec<MinerState> = (0..22)
            .map(|i| miner(&mut auth, &format!("m{i:02}"), 10))
            .collect();
        let mut votes = BTreeMap::new();
        let mut rng = derive_rng(3, "election-votes", &[]);
        for w in 0..20 {
            let choices: Vec<EntityId> = (0..22)
                .filter(|_| rng.random_range(0..3u32) == 0)
                .map(|i| EntityId::new(format!("m{i:02}")))
                .collect();
            votes.insert(EntityId::new(format!("w{w:02}")), choices);
        }
        let committee = elect_delegates(&candidates, &votes, 11, 1, 3).unwrap();

        // Brute-force oracle: tally then sort (votes desc, id asc).
        let mut tally: BTreeMap<EntityId, u32> = BTreeMap::new();
        for cs in votes.values() {
            for c in cs {
                *tally.entry(c.clone()).or_insert(0) += 1;
            }
        }
        let mut expected: Vec<(u32, EntityId)> = candidates
            .iter()
            .map(|c| (tally.get(c.id()).copied().unwrap_or(0), c.id().clone()))
            .collect();
        expected.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let want: Vec<EntityId> = expected.into_iter().take(11).map(|(_, id)| id).collect();
        let got: Vec<EntityId> = committee.members().iter().map(|m| m.id().clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn election_enforces_deposits() {
        let mut auth = Authority::new(4);
        let candidates = alloc::vec![miner(&mut auth, "rich", 100), miner(&mut auth, "poor", 1)];
        let votes = votes_for(&[("w0", &["rich", "poor"])]);
        assert!(elect_delegates(&candidates, &votes, 2, 10, 7).is_err());
    }

    fn blobs_policy(theta: f64) -> (ModelSpec, QualityPolicy, Dataset) {
        let spec = BlobsSpec {
            samples: 400,
            features: 8,
            classes: 4,
            informative: 6,
            center_scale: 3.0,
            noise_sigma: 0.8,
        };
        let data = generate_blobs(&spec, 21).unwrap();
        let (train, test) = data.split_fraction(0.7, 21).unwrap();
        let model_spec = ModelSpec::Logistic { input_dim: 8, classes: 4 };
        (model_spec, QualityPolicy { theta, test_set: test }, train)
    }

    fn signed_update(auth: &Authority, worker: &str, sparse: SparseGradient, ts: u64) -> LocalUpdate {
        let bytes = LocalUpdate::signing_bytes(&worker.into(), sparse.round(), &sparse, ts);
        LocalUpdate {
            worker_id: worker.into(),
            round: sparse.round(),
            sparse,
            signature: auth.sign(&worker.into(), &bytes).unwrap(),
            timestamp_ms: ts,
        }
    }

    #[test]
    fn zero_update_always_qualifies() {
        let mut auth = Authority::new(5);
        auth.register("w0".into(), Role::Worker).unwrap();
        let (spec, policy, _) = blobs_policy(0.05);
        let global = ModelParameters::init(spec, 5).unwrap();
        let sparse = SparseGradient::new(alloc::vec![], spec.param_count() as u32, 1).unwrap();
        let update = signed_update(&auth, "w0", sparse, 0);
        let (ok, _) = evaluate_update(spec, &update, &global, &policy, 0.1, &auth).unwrap();
        assert!(ok);
    }

    #[test]
    fn vacuous_threshold_qualifies_everything() {
        let mut auth = Authority::new(6);
        auth.register("w0".into(), Role::Worker).unwrap();
        let (spec, mut policy, train) = blobs_policy(1.0);
        policy.theta = 1.0;
        let global = ModelParameters::init(spec, 6).unwrap();
        // A hostile update: large positive step along the gradient.
        let g = crate::model::gradient(spec, &global, &train.all()).unwrap();
        let entries: Vec<(u32, f64)> = g
            .values()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v * 50.0))
            .collect();
        let sparse = SparseGradient::new(entries, spec.param_count() as u32, 1).unwrap();
        let update = signed_update(&auth, "w0", sparse, 0);
        let (ok, _) = evaluate_update(spec, &update, &global, &policy, 1.0, &auth).unwrap();
        assert!(ok);
    }

    #[test]
    fn sign_flipped_gradient_fails_the_gate() {
        let mut auth = Authority::new(7);
        auth.register("w0".into(), Role::Worker).unwrap();
        let (spec, policy, train) = blobs_policy(0.05);
        // Train the global model a few plain-SGD steps so accuracy is real.
        let mut global = ModelParameters::init(spec, 7).unwrap();
        for _ in 0..30 {
            let g = crate::model::gradient(spec, &global, &train.all()).unwrap();
            global = sgd_step(&global, &g, 1.0).unwrap();
        }
        let base = evaluate_accuracy(spec, &global, &policy.test_set.all()).unwrap();
        assert!(base > 0.7, "baseline accuracy too low for the oracle: {base}");

        // Poisoned update: sign-flipped batch gradient rescaled to the
        // model's own magnitude, so the ascent step is material even after
        // the gradient has shrunk.
        let g = crate::model::gradient(spec, &global, &train.all()).unwrap();
        let weight_norm = libm::sqrt(global.values().iter().map(|v| v * v).sum());
        let scale = 2.0 * (1.0 + weight_norm) / g.l2_norm();
        let entries: Vec<(u32, f64)> = g
            .values()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, -*v * scale))
            .collect();
        let sparse = SparseGradient::new(entries, spec.param_count() as u32, 1).unwrap();
        let update = signed_update(&auth, "w0", sparse, 0);
        let (ok, acc) = evaluate_update(spec, &update, &global, &policy, 1.0, &auth).unwrap();
        assert!(!ok, "poisoned update qualified: baseline {base}, candidate {acc}");
        assert!(base - acc > 0.05);
    }

    #[test]
    fn tampered_update_signature_is_an_error() {
        let mut auth = Authority::new(8);
        auth.register("w0".into(), Role::Worker).unwrap();
        let (spec, policy, _) = blobs_policy(0.05);
        let global = ModelParameters::init(spec, 8).unwrap();
        let sparse = SparseGradient::new(alloc::vec![(0, 1.0)], spec.param_count() as u32, 1).unwrap();
        let mut update = signed_update(&auth, "w0", sparse, 0);
        update.signature.0[0] ^= 1;
        assert!(matches!(
            evaluate_update(spec, &update, &global, &policy, 0.1, &auth),
            Err(CoreError::InvalidSignature(_))
        ));
    }

    fn response(auth: &Authority, verifier: &str, round: u32, qualified: &[&str]) -> VerifierResponse {
        let q: BTreeSet<EntityId> = qualified.iter().map(|s| EntityId::new(*s)).collect();
        let bytes = VerifierResponse::signing_bytes(&verifier.into(), round, &q, &[], 0);
        VerifierResponse {
            verifier_id: verifier.into(),
            round,
            qualified: q,
            comparison: alloc::vec![],
            signature: auth.sign(&verifier.into(), &bytes).unwrap(),
            timestamp_ms: 0,
        }
    }

    fn auth_with_verifiers(n: usize) -> Authority {
        let mut auth = Authority::new(9);
        for i in 0..n {
            auth.register(EntityId::new(format!("v{i}")), Role::Miner).unwrap();
        }
        auth
    }

    #[test]
    fn cross_verify_all_agree() {
        let auth = auth_with_verifiers(4);
        let updates: Vec<EntityId> = ["u0", "u1"].iter().map(|s| EntityId::new(*s)).collect();
        let responses: Vec<VerifierResponse> =
            (0..4).map(|i| response(&auth, &format!("v{i}"), 1, &["u0"])).collect();
        let cv = cross_verify(&responses, &updates);
        assert!(cv.disagreement.values().all(|&d| d == 0));
        assert_eq!(cv.approvals[&EntityId::new("u0")], 4);
        assert_eq!(cv.approvals[&EntityId::new("u1")], 0);
    }

    #[test]
    fn cross_verify_single_inverter_score() {
        let auth = auth_with_verifiers(10);
        let update_names = ["u0", "u1", "u2"];
        let updates: Vec<EntityId> = update_names.iter().map(|s| EntityId::new(*s)).collect();
        let mut responses: Vec<VerifierResponse> =
            (0..9).map(|i| response(&auth, &format!("v{i}"), 1, &update_names)).collect();
        // v9 inverts every bit (qualifies nothing).
        responses.push(response(&auth, "v9", 1, &[]));
        let cv = cross_verify(&responses, &updates);
        assert_eq!(cv.disagreement[&EntityId::new("v9")], 9 * 3);
        for i in 0..9 {
            assert_eq!(cv.disagreement[&EntityId::new(format!("v{i}"))], 3);
        }
    }

    fn committee_of(auth: &mut Authority, names: &[&str], leader: &str) -> Committee {
        let members: Vec<MinerState> = names
            .iter()
            .map(|n| {
                let cred = auth.register((*n).into(), Role::Miner).unwrap();
                let mut m = MinerState::candidate(cred.identity, 10);
                m.status = if *n == leader { MinerStatus::Leader } else { MinerStatus::Verifier };
                m
            })
            .collect();
        Committee { members, leader: leader.into(), streaks: BTreeMap::new() }
    }

    fn commit_fixture(approvals: usize, verifiers: usize) -> (Authority, Committee, SubchainState, Vec<VerifierResponse>, BTreeMap<EntityId, LocalUpdate>) {
        let mut auth = Authority::new(10);
        let names: Vec<alloc::string::String> =
            (0..=verifiers).map(|i| if i == 0 { "lead".to_string() } else { format!("v{:02}", i - 1) }).collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let committee = committee_of(&mut auth, &refs, "lead");
        auth.register("w0".into(), Role::Worker).unwrap();

        let sparse = SparseGradient::new(alloc::vec![(0, 0.5)], 4, 1).unwrap();
        let update = signed_update(&auth, "w0", sparse, 0);
        let mut updates = BTreeMap::new();
        updates.insert(EntityId::new("w0"), update);

        // `approvals` verifiers say {w0}; the rest say {} (inverted).
        let responses: Vec<VerifierResponse> = (0..verifiers)
            .map(|i| {
                let set: &[&str] = if i < approvals { &["w0"] } else { &[] };
                response(&auth, &format!("v{i:02}"), 1, set)
            })
            .collect();

        let writers: BTreeSet<EntityId> = refs.iter().map(|s| EntityId::new(*s)).collect();
        let chain = SubchainState::create(
            "training-0",
            ChainKind::Training,
            writers.clone(),
            writers,
            &"lead".into(),
            0,
            &auth,
        )
        .unwrap();
        (auth, committee, chain, responses, updates)
    }

    fn run_commit(approvals: usize, verifiers: usize) -> CommitDecision {
        let (auth, committee, mut chain, responses, updates) = commit_fixture(approvals, verifiers);
        let update_ids: Vec<EntityId> = updates.keys().cloned().collect();
        let tallies = cross_verify(&responses, &update_ids);
        assemble_and_commit(
            &"lead".into(),
            &committee,
            1,
            &updates,
            &responses,
            &tallies,
            alloc::vec![],
            [0u8; 32],
            &mut chain,
            100,
            &auth,
        )
        .unwrap()
    }

    #[test]
    fn commit_boundary_seven_of_ten() {
        match run_commit(7, 10) {
            CommitDecision::Committed { qualified, .. } => {
                assert_eq!(qualified, alloc::vec![EntityId::new("w0")]);
            }
            other => panic!("expected commit, got {other:?}"),
        }
    }

    #[test]
    fn commit_boundary_six_of_ten_fails() {
        assert_eq!(
            run_commit(6, 10),
            CommitDecision::Failed { approving: 6, verifier_count: 10 }
        );
    }

    #[test]
    fn commit_boundary_two_of_three_fails_strictly() {
        assert_eq!(
            run_commit(2, 3),
            CommitDecision::Failed { approving: 2, verifier_count: 3 }
        );
    }

    #[test]
    fn non_leader_assembly_is_a_violation() {
        let (auth, committee, mut chain, responses, updates) = commit_fixture(3, 3);
        let update_ids: Vec<EntityId> = updates.keys().cloned().collect();
        let tallies = cross_verify(&responses, &update_ids);
        let err = assemble_and_commit(
            &"v00".into(),
            &committee,
            1,
            &updates,
            &responses,
            &tallies,
            alloc::vec![],
            [0u8; 32],
            &mut chain,
            100,
            &auth,
        );
        assert!(matches!(err, Err(CoreError::ProtocolViolation(_))));
    }

    #[test]
    fn slash_is_idempotent_and_final() {
        let mut auth = Authority::new(11);
        let mut committee = committee_of(&mut auth, &["a", "b", "c"], "a");
        let rec = committee.slash(&"b".into(), SlashReason::FalseVerification, 3);
        assert!(rec.is_some());
        assert!(committee.slash(&"b".into(), SlashReason::Equivocation, 4).is_none());
        let member = committee.members().iter().find(|m| m.id().as_str() == "b").unwrap();
        assert_eq!(member.deposit, 0);
        assert_eq!(member.status, MinerStatus::Slashed);
        assert!(!committee.verifiers().contains(&EntityId::new("b")));
    }

    #[test]
    fn disagreement_streak_triggers_after_three_rounds() {
        let mut auth = Authority::new(12);
        let mut committee = committee_of(&mut auth, &["a", "b", "c", "d"], "a");
        for round in 0..2 {
            let due = committee.note_disagreements(
                &[("b".into(), true), ("c".into(), false), ("d".into(), false)],
                3,
            );
            assert!(due.is_empty(), "slashed too early at round {round}");
        }
        let due = committee.note_disagreements(
            &[("b".into(), true), ("c".into(), false), ("d".into(), false)],
            3,
        );
        assert_eq!(due, alloc::vec![EntityId::new("b")]);
        // An honest verifier that disagreed once recovers.
        let mut committee2 = committee_of(&mut auth, &["x", "y", "z"], "x");
        committee2.note_disagreements(&[("y".into(), true)], 3);
        committee2.note_disagreements(&[("y".into(), false)], 3);
        committee2.note_disagreements(&[("y".into(), true)], 3);
        let due = committee2.note_disagreements(&[("y".into(), true)], 3);
        assert!(due.is_empty());
    }

    #[test]
    fn rotation_single_delegate_is_always_leader() {
        let mut auth = Authority::new(13);
        let mut committee = committee_of(&mut auth, &["only"], "only");
        for round in 1..20 {
            committee.rotate_roles(13, round).unwrap();
            assert_eq!(committee.leader().as_str(), "only");
        }
    }

    #[test]
    fn rotation_is_deterministic_and_roughly_uniform() {
        let mut auth = Authority::new(14);
        let names: Vec<alloc::string::String> = (0..11).map(|i| format!("m{i:02}")).collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let mut a = committee_of(&mut auth, &refs, "m00");
        let mut counts: BTreeMap<EntityId, u32> = BTreeMap::new();
        for round in 1..=1000 {
            a.rotate_roles(18, round).unwrap();
            *counts.entry(a.leader().clone()).or_insert(0) += 1;
        }
        // Rerun: identical sequence.
        let mut auth2 = Authority::new(15);
        let mut b = committee_of(&mut auth2, &refs, "m00");
        let mut counts_b: BTreeMap<EntityId, u32> = BTreeMap::new();
        for round in 1..=1000 {
            b.rotate_roles(18, round).unwrap();
            *counts_b.entry(b.leader().clone()).or_insert(0) += 1;
        }
        assert_eq!(counts, counts_b);
        // Each of the 11 delegates leads 1000/11 ± 15%.
        let expect = 1000.0 / 11.0;
        for &c in counts.values() {
            assert!((c as f64) > expect * 0.85 && (c as f64) < expect * 1.15, "leader count {c}");
        }
    }

    #[test]
    fn global_update_single_equals_direct_application() {
        let dim = 6u32;
        let mut auth = Authority::new(16);
        auth.register("w0".into(), Role::Worker).unwrap();
        let names = ["lead"];
        let committee = committee_of(&mut auth, &names, "lead");
        let _ = committee;

        let sparse = SparseGradient::new(alloc::vec![(1, 2.0), (4, -1.0)], dim, 1).unwrap();
        let update = signed_update(&auth, "w0", sparse.clone(), 0);
        let global = ModelParameters::new(alloc::vec![1.0; dim as usize]).unwrap();
        let block = Block {
            height: 1,
            prev_hash: [0u8; 32],
            merkle_root: [0u8; 32],
            timestamp_ms: 0,
            leader_id: "lead".into(),
            payload: BlockPayload::Training(TrainingPayload {
                round: 1,
                updates: alloc::vec![update],
                responses: alloc::vec![],
                slashes: alloc::vec![],
                global_model_digest: [0u8; 32],
            }),
            leader_signature: Signature([0u8; 32]),
        };
        let next = compute_global_update(&block, &global, 0.5).unwrap();
        let direct = sgd_step(&global, &sparse.densify(), 0.5).unwrap();
        assert_eq!(next, direct);
    }

    #[test]
    fn global_update_opposite_gradients_cancel() {
        let dim = 4u32;
        let mut auth = Authority::new(17);
        auth.register("w0".into(), Role::Worker).unwrap();
        auth.register("w1".into(), Role::Worker).unwrap();
        let g = SparseGradient::new(alloc::vec![(0, 1.5), (2, -0.5)], dim, 1).unwrap();
        let ng = SparseGradient::new(alloc::vec![(0, -1.5), (2, 0.5)], dim, 1).unwrap();
        let global = ModelParameters::new(alloc::vec![0.25; 4]).unwrap();
        let block = Block {
            height: 1,
            prev_hash: [0u8; 32],
            merkle_root: [0u8; 32],
            timestamp_ms: 0,
            leader_id: "x".into(),
            payload: BlockPayload::Training(TrainingPayload {
                round: 1,
                updates: alloc::vec![
                    signed_update(&auth, "w0", g, 0),
                    signed_update(&auth, "w1", ng, 0),
                ],
                responses: alloc::vec![],
                slashes: alloc::vec![],
                global_model_digest: [0u8; 32],
            }),
            leader_signature: Signature([0u8; 32]),
        };
        assert_eq!(compute_global_update(&block, &global, 0.1).unwrap(), global);
    }

    #[test]
    fn empty_block_leaves_global_unchanged() {
        let global = ModelParameters::new(alloc::vec![1.0, 2.0]).unwrap();
        let block = Block {
            height: 1,
            prev_hash: [0u8; 32],
            merkle_root: [0u8; 32],
            timestamp_ms: 0,
            leader_id: "x".into(),
            payload: BlockPayload::Training(TrainingPayload {
                round: 1,
                updates: alloc::vec![],
                responses: alloc::vec![],
                slashes: alloc::vec![],
                global_model_digest: [0u8; 32],
            }),
            leader_signature: Signature([0u8; 32]),
        };
        assert_eq!(compute_global_update(&block, &global, 0.1).unwrap(), global);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cross_verify_matches_recount_oracle(seed in 0u64..2_000) {
            let mut rng = derive_rng(seed, "recount", &[]);
            let auth = auth_with_verifiers(6);
            let update_ids: Vec<EntityId> = (0..4).map(|i| EntityId::new(format!("u{i}"))).collect();
            let responses: Vec<VerifierResponse> = (0..6)
                .map(|i| {
                    let names: Vec<&str> = update_ids
                        .iter()
                        .filter(|_| rng.random_range(0..2u32) == 0)
                        .map(|id| id.as_str())
                        .collect();
                    response(&auth, &format!("v{i}"), 1, &names)
                })
                .collect();
            let cv = cross_verify(&responses, &update_ids);
            // Brute-force recount.
            for u in &update_ids {
                let want = responses.iter().filter(|r| r.qualified.contains(u)).count() as u32;
                prop_assert_eq!(cv.approvals[u], want);
            }
            for r in &responses {
                let mut want = 0u32;
                for p in &responses {
                    if p.verifier_id == r.verifier_id { continue; }
                    for u in &update_ids {
                        if r.qualified.contains(u) != p.qualified.contains(u) {
                            want += 1;
                        }
                    }
                }
                prop_assert_eq!(cv.disagreement[&r.verifier_id], want);
            }
        }

        #[test]
        fn safety_under_one_third_byzantine_with_arbitrary_lies(
            seed in 0u64..5_000,
            verifier_count in 4usize..13,
            update_count in 1usize..6,
        ) {
            // With f ≤ ⌊(V−1)/3⌋ verifiers reporting arbitrary qualified
            // sets, the assembled block always holds exactly the honest set
            // and always commits.
            let mut rng = derive_rng(seed, "byz-safety", &[]);
            let f = (verifier_count - 1) / 3;
            let mut auth = Authority::new(seed);
            let names: Vec<alloc::string::String> = core::iter::once("lead".to_string())
                .chain((0..verifier_count).map(|i| format!("v{i:02}")))
                .collect();
            let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let committee = committee_of(&mut auth, &refs, "lead");

            let update_names: Vec<alloc::string::String> =
                (0..update_count).map(|i| format!("w{i}")).collect();
            let mut updates = BTreeMap::new();
            for name in &update_names {
                auth.register(EntityId::new(name.clone()), Role::Worker).unwrap();
                let sparse = SparseGradient::new(alloc::vec![(0, 1.0)], 4, 1).unwrap();
                updates.insert(EntityId::new(name.clone()), signed_update(&auth, name, sparse, 0));
            }
            // Honest verdict: a random subset of updates.
            let honest: Vec<&str> = update_names
                .iter()
                .filter(|_| rng.random_range(0..2u32) == 0)
                .map(|s| s.as_str())
                .collect();

            let mut responses = Vec::new();
            for i in 0..verifier_count {
                let vname = format!("v{i:02}");
                if i < f {
                    // Byzantine: arbitrary lie.
                    let lie: Vec<&str> = update_names
                        .iter()
                        .filter(|_| rng.random_range(0..2u32) == 0)
                        .map(|s| s.as_str())
                        .collect();
                    responses.push(response(&auth, &vname, 1, &lie));
                } else {
                    responses.push(response(&auth, &vname, 1, &honest));
                }
            }
            let update_ids: Vec<EntityId> = updates.keys().cloned().collect();
            let tallies = cross_verify(&responses, &update_ids);
            let writers: BTreeSet<EntityId> = refs.iter().map(|s| EntityId::new(*s)).collect();
            let mut chain = SubchainState::create(
                "training-0",
                ChainKind::Training,
                writers.clone(),
                writers,
                &"lead".into(),
                0,
                &auth,
            )
            .unwrap();
            let decision = assemble_and_commit(
                &"lead".into(),
                &committee,
                1,
                &updates,
                &responses,
                &tallies,
                alloc::vec![],
                [0u8; 32],
                &mut chain,
                1,
                &auth,
            )
            .unwrap();
            match decision {
                CommitDecision::Committed { qualified, .. } => {
                    let got: Vec<&str> = qualified.iter().map(|id| id.as_str()).collect();
                    let mut want = honest.clone();
                    want.sort();
                    prop_assert_eq!(got, want);
                }
                CommitDecision::Failed { approving, verifier_count } => {
                    return Err(proptest::test_runner::TestCaseError::fail(format!(
                        "round failed under f={f} of {verifier_count} with {approving} approvals"
                    )));
                }
            }
        }

        #[test]
        fn compute_global_update_matches_dense_oracle(seed in 0u64..2_000, k in 1usize..5) {
            let dim = 12u32;
            let mut rng = derive_rng(seed, "dense-oracle", &[]);
            let mut auth = Authority::new(seed);
            let mut updates = Vec::new();
            for w in 0..k {
                let name = format!("w{w}");
                auth.register(EntityId::new(name.clone()), Role::Worker).unwrap();
                let mut entries = Vec::new();
                for i in 0..dim {
                    if rng.random_range(0..2u32) == 0 {
                        entries.push((i, rng.random_range(0.1..2.0)));
                    }
                }
                let sparse = SparseGradient::new(entries, dim, 1).unwrap();
                updates.push(signed_update(&auth, &name, sparse, 0));
            }
            let global = ModelParameters::new((0..dim).map(|i| i as f64 * 0.1).collect()).unwrap();
            let eta = 0.3;
            let block = Block {
                height: 1,
                prev_hash: [0u8; 32],
                merkle_root: [0u8; 32],
                timestamp_ms: 0,
                leader_id: "x".into(),
                payload: BlockPayload::Training(TrainingPayload {
                    round: 1,
                    updates: updates.clone(),
                    responses: alloc::vec![],
                    slashes: alloc::vec![],
                    global_model_digest: [0u8; 32],
                }),
                leader_signature: Signature([0u8; 32]),
            };
            let got = compute_global_update(&block, &global, eta).unwrap();
            // Oracle: densify each update, average, step.
            let mut mean = alloc::vec![0.0f64; dim as usize];
            for u in &updates {
                for (m, v) in mean.iter_mut().zip(u.sparse.densify().into_values()) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= updates.len() as f64;
            }
            for ((g, w), m) in got.values().iter().zip(global.values()).zip(&mean) {
                let want = w - eta * m;
                prop_assert!((g - want).abs() < 1e-12);
            }
        }
    }
}
