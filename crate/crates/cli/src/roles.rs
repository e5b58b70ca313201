//! The three network roles. Each is a single loop over framed messages.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use nn_emd_core::authority::{Authority, KeyService};
use nn_emd_core::feip::{MiFunctionalKey, SiFunctionalKey};
use nn_emd_core::trainer::{
    assemble_round, client_preprocess, enforce_guard, server_train, ClientContext, ClientKeys, DatasetType,
    SessionSetup, TrainingMode,
};
use nn_emd_core::Error;
use rand::SeedableRng;

use crate::config::{Role, RunConfig};
use crate::dataset::{load_split, partition};
use crate::run::{test_accuracy, write_checkpoint, MetricsWriter, RunSummary};
use crate::wire::{Channel, Message, MetaPayload};

fn timeout(cfg: &RunConfig) -> Duration {
    Duration::from_millis(cfg.connect_timeout_ms)
}

fn accept(listener: &TcpListener, cfg: &RunConfig) -> Result<Channel> {
    let (stream, _) = listener.accept()?;
    Channel::new(stream, &cfg.run_digest(), cfg.max_frame_bytes)
}

fn expect_hello(ch: &mut Channel, role: Role) -> Result<Option<usize>> {
    match ch.recv()? {
        Message::Hello { role: r, source_id } if r == role => Ok(source_id),
        other => {
            ch.abort("unexpected greeting");
            bail!("expected Hello from {role:?}, got {}", other.type_name())
        }
    }
}

/// Number of client processes the configured mode involves.
pub fn expected_clients(cfg: &RunConfig) -> usize {
    match cfg.mode {
        TrainingMode::Hpt => cfg.sources,
        TrainingMode::Vpt => cfg.vertical_sources,
        TrainingMode::Hybrid => cfg.sources + cfg.vertical_sources,
    }
}

pub fn check_sizes(cfg: &RunConfig, setup: &SessionSetup) -> Result<()> {
    if let Some(eta) = cfg.eta {
        if eta != setup.si_eta {
            bail!("configured eta {eta} differs from the plan's {}", setup.si_eta);
        }
    }
    if let Some(etas) = &cfg.etas {
        if *etas != setup.etas {
            bail!("configured etas {etas:?} differ from the plan's {:?}", setup.etas);
        }
    }
    if let Some(n) = cfg.n {
        if n != setup.etas.len() {
            bail!("configured n {n} differs from the plan's {}", setup.etas.len());
        }
    }
    Ok(())
}

/// Authority: set up on the server's request, deliver keys to registering
/// sources, then answer key requests until the server is done.
pub fn run_tpa(cfg: &RunConfig) -> Result<()> {
    let listener = TcpListener::bind(&cfg.tpa_addr).with_context(|| format!("binding {}", cfg.tpa_addr))?;
    log::info!("authority listening on {}", cfg.tpa_addr);
    let params = cfg.params()?;
    let mut server = accept(&listener, cfg)?;
    expect_hello(&mut server, Role::Server)?;
    let (mut authority, clients) = match server.recv()? {
        Message::MetaInfo(MetaPayload::Authority {
            si_eta,
            etas,
            tau,
            weight_limit,
            clients,
        }) => {
            let mut rng = rand::rngs::StdRng::from_entropy();
            let mut a = Authority::init(&params, si_eta, &etas, etas.len(), tau, weight_limit, &mut rng)?;
            if let Some(path) = &cfg.authority_log {
                a = a.with_log_file(path)?;
            }
            (a, clients)
        }
        other => bail!("expected authority setup, got {}", other.type_name()),
    };
    server.send(&Message::PublicKeyDelivery(ClientKeys {
        si_public: authority.si_public_key().clone(),
        mi_party: None,
    }))?;

    for _ in 0..clients {
        let mut ch = accept(&listener, cfg)?;
        let id = expect_hello(&mut ch, Role::Client)?;
        match ch.recv()? {
            Message::RegisterSource { source_id, slot } if Some(source_id) == id => {
                let mi_party = match slot {
                    Some(s) => match authority.register_source(s) {
                        Ok(keys) => Some(keys.mi_party),
                        Err(e) => {
                            ch.abort(&e.to_string());
                            return Err(e.into());
                        }
                    },
                    None => None,
                };
                ch.send(&Message::PublicKeyDelivery(ClientKeys {
                    si_public: authority.si_public_key().clone(),
                    mi_party,
                }))?;
            }
            other => {
                ch.abort("expected registration");
                bail!("expected RegisterSource, got {}", other.type_name());
            }
        }
    }

    loop {
        let reply = match server.recv()? {
            Message::SiKeyRequest { y } => match authority.serve_si_key(&y) {
                Ok(k) => Message::SiKeyResponse(k),
                Err(e) => Message::Reject { reason: e.to_string() },
            },
            Message::MiKeyRequest { y } => match authority.serve_mi_key(&y) {
                Ok(k) => Message::MiKeyResponse(k),
                Err(e) => Message::Reject { reason: e.to_string() },
            },
            Message::Done => break,
            other => {
                server.abort("unexpected message");
                bail!("unexpected {} from server", other.type_name());
            }
        };
        server.send(&reply)?;
    }
    log::info!("authority served {} key requests", authority.log().len());
    Ok(())
}

/// Key service backed by a connection to the authority.
pub struct RemoteKeys {
    channel: Channel,
}

impl RemoteKeys {
    fn ask(&mut self, msg: Message) -> nn_emd_core::Result<Message> {
        self.channel
            .send(&msg)
            .and_then(|_| self.channel.recv())
            .map_err(|e| Error::Wire(format!("{e:#}")))
            .and_then(|m| match m {
                Message::Reject { reason } => Err(Error::FilterRejected(reason)),
                m => Ok(m),
            })
    }
}

impl KeyService for RemoteKeys {
    fn request_si_key(&mut self, y: &[i64]) -> nn_emd_core::Result<SiFunctionalKey> {
        match self.ask(Message::SiKeyRequest { y: y.to_vec() })? {
            Message::SiKeyResponse(k) => Ok(k),
            other => Err(Error::Wire(format!("expected SiKeyResponse, got {}", other.type_name()))),
        }
    }

    fn request_mi_key(&mut self, y: &[i64]) -> nn_emd_core::Result<MiFunctionalKey> {
        match self.ask(Message::MiKeyRequest { y: y.to_vec() })? {
            Message::MiKeyResponse(k) => Ok(k),
            other => Err(Error::Wire(format!("expected MiKeyResponse, got {}", other.type_name()))),
        }
    }
}

fn abort_all(clients: &mut BTreeMap<usize, Channel>, reason: &str) {
    for ch in clients.values_mut() {
        ch.abort(reason);
    }
}

pub fn run_server(cfg: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let listener = TcpListener::bind(&cfg.server_addr).with_context(|| format!("binding {}", cfg.server_addr))?;
    log::info!("server listening on {}", cfg.server_addr);
    let mut clients = BTreeMap::new();
    let mut metas = Vec::new();
    let mut hashes = BTreeMap::new();
    for _ in 0..expected_clients(cfg) {
        let mut ch = accept(&listener, cfg)?;
        let id = expect_hello(&mut ch, Role::Client)?.context("client did not name its source")?;
        match ch.recv()? {
            Message::MetaInfo(MetaPayload::Source { meta, id_hashes }) if meta.source_id == id => {
                if let Some(h) = id_hashes {
                    hashes.insert(id, h);
                }
                metas.push(meta);
            }
            other => bail!("expected source meta from {id}, got {}", other.type_name()),
        }
        if clients.insert(id, ch).is_some() {
            bail!("source {id} connected twice");
        }
    }

    let setup = match SessionSetup::derive(&metas, &cfg.plan_options(), &hashes)
        .and_then(|s| enforce_guard(&s.plan, cfg.unsafe_override_privacy_guard).map(|_| s))
    {
        Ok(s) => s,
        Err(e) => {
            abort_all(&mut clients, &e.to_string());
            if let Ok(mut tpa) = Channel::connect(&cfg.tpa_addr, &cfg.run_digest(), cfg.max_frame_bytes, timeout(cfg)) {
                tpa.abort(&e.to_string());
            }
            return Err(e.into());
        }
    };
    check_sizes(cfg, &setup)?;
    let plan = setup.plan.clone();

    let mut tpa = Channel::connect(&cfg.tpa_addr, &cfg.run_digest(), cfg.max_frame_bytes, timeout(cfg))?;
    tpa.send(&Message::Hello {
        role: Role::Server,
        source_id: None,
    })?;
    tpa.send(&Message::MetaInfo(MetaPayload::Authority {
        si_eta: setup.si_eta,
        etas: setup.etas.clone(),
        tau: plan.tau,
        weight_limit: setup.server_codec()?.limit() as u64,
        clients: clients.len(),
    }))?;
    let si_public = match tpa.recv()? {
        Message::PublicKeyDelivery(keys) => keys.si_public,
        other => bail!("expected public key, got {}", other.type_name()),
    };
    si_public.validate()?;
    let solver = setup.solver(si_public.params(), cfg.dlog_mode)?;

    for (id, ch) in clients.iter_mut() {
        ch.send(&Message::MetaInfo(MetaPayload::Plan {
            plan: plan.clone(),
            alignment: setup.alignment.get(id).cloned(),
        }))?;
    }

    let test = load_split(cfg, false)?;
    let mut metrics = MetricsWriter::create(&cfg.metrics_path())?;
    let mut last_loss = None;
    let mut keys = RemoteKeys { channel: tpa };
    let load_round = |round: usize| -> nn_emd_core::Result<_> {
        let mut pre = Vec::new();
        for (&id, ch) in clients.iter_mut() {
            let wire = |e: anyhow::Error| Error::Wire(format!("source {id}: {e:#}"));
            let mut batch = match ch.recv().map_err(wire)? {
                Message::CiphertextBatch(p) if p.source_id == id && p.round == round => p,
                other => return Err(Error::Wire(format!("source {id}: unexpected {}", other.type_name()))),
            };
            if metas.iter().any(|m| m.source_id == id && m.has_labels) {
                match ch.recv().map_err(wire)? {
                    Message::LabelBlock {
                        source_id,
                        round: r,
                        labels,
                    } if source_id == id && r == round => batch.labels = Some(labels),
                    other => return Err(Error::Wire(format!("source {id}: expected labels, got {}", other.type_name()))),
                }
            }
            pre.push(batch);
        }
        assemble_round(&plan, pre)
    };
    let result = server_train(
        &plan,
        &mut keys,
        &solver,
        &si_public,
        setup.etas.clone(),
        cfg.unsafe_override_privacy_guard,
        load_round,
        |m, _| {
            last_loss = Some(m.loss);
            if let Err(e) = metrics.batch(m) {
                log::warn!("metrics: {e:#}");
            }
        },
    );
    let model = match result {
        Ok(m) => m,
        Err(e) => {
            abort_all(&mut clients, &e.to_string());
            keys.channel.abort(&e.to_string());
            return Err(e.into());
        }
    };
    let checkpoint = cfg.checkpoint_path();
    write_checkpoint(&model, &checkpoint)?;
    keys.channel.send(&Message::Done)?;
    for ch in clients.values_mut() {
        ch.send(&Message::Done)?;
    }
    let summary = RunSummary {
        accuracy: test_accuracy(&model, test.as_ref())?,
        steps: model.step,
        final_loss: last_loss,
        key_requests: 0,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        checkpoint,
    };
    metrics.summary(&summary)?;
    Ok(summary)
}

pub fn run_client(cfg: &RunConfig) -> Result<()> {
    let id = cfg.source_id.context("client needs source_id")?;
    let train = load_split(cfg, true)?.context("no training data configured")?;
    let source = partition(cfg, &train)?
        .into_iter()
        .find(|s| s.meta.source_id == id)
        .with_context(|| format!("partition has no source {id}"))?;
    let digest = cfg.run_digest();

    let mut server = Channel::connect(&cfg.server_addr, &digest, cfg.max_frame_bytes, timeout(cfg))?;
    server.send(&Message::Hello {
        role: Role::Client,
        source_id: Some(id),
    })?;
    let partial = source.meta.dataset_type == DatasetType::Partial;
    server.send(&Message::MetaInfo(MetaPayload::Source {
        meta: source.meta.clone(),
        id_hashes: partial.then(|| source.id_hashes()),
    }))?;
    let (plan, alignment) = match server.recv()? {
        Message::MetaInfo(MetaPayload::Plan { plan, alignment }) => (plan, alignment),
        other => bail!("expected plan, got {}", other.type_name()),
    };

    let mut tpa = Channel::connect(&cfg.tpa_addr, &digest, cfg.max_frame_bytes, timeout(cfg))?;
    tpa.send(&Message::Hello {
        role: Role::Client,
        source_id: Some(id),
    })?;
    tpa.send(&Message::RegisterSource {
        source_id: id,
        slot: if partial { plan.slot_of(id) } else { None },
    })?;
    let keys = match tpa.recv()? {
        Message::PublicKeyDelivery(keys) => keys,
        other => bail!("expected keys, got {}", other.type_name()),
    };
    drop(tpa);
    keys.si_public.validate()?;
    if let Some(p) = &keys.mi_party {
        p.validate()?;
    }

    let ctx = ClientContext {
        pool_seed: cfg.pool_seed,
        alignment,
    };
    let mut rng = rand::rngs::StdRng::from_entropy();
    for round in 0..plan.n_shuffle() {
        let mut pre = client_preprocess(&source, &plan, &keys, &ctx, round, &mut rng)?;
        let labels = pre.labels.take();
        server.send(&Message::CiphertextBatch(pre))?;
        if let Some(labels) = labels {
            server.send(&Message::LabelBlock {
                source_id: id,
                round,
                labels,
            })?;
        }
    }
    match server.recv()? {
        Message::Done => Ok(()),
        other => bail!("expected Done, got {}", other.type_name()),
    }
}
