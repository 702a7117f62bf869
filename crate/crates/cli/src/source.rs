use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use compose_probe_core::embedding::{
    cache_dir_from_env, EmbeddingSource, EmbeddingStore, EncoderClient, EncoderEndpoint, RemoteSource, StoreSource,
};
use serde::Serialize;

use crate::exit::{Failure, Outcome, OrExit, RUNTIME};
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Args, Serialize)]
pub struct EncoderArgs {
    /// Encoder sidecar URL (http://...) or path to an EMB1 embedding store.
    #[arg(long)]
    pub encoder: Option<String>,
    /// Model name recorded for a store-backed encoder.
    #[arg(long, default_value = "store")]
    pub model_name: String,
    /// Input side length assumed for a store-backed encoder.
    #[arg(long, default_value_t = 224)]
    pub input_side: u32,
    /// Concurrent requests to the sidecar.
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
}

/// An opened encoder; remote encoders persist their cache on `close`.
pub struct Encoder {
    pub source: Arc<dyn EmbeddingSource>,
    remote: Option<(Arc<RemoteSource>, Option<PathBuf>)>,
}

fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

impl EncoderArgs {
    pub fn open(&self, manifest: &mut RunManifest) -> Outcome<Encoder> {
        let Some(target) = &self.encoder else {
            return Err(Failure::usage("this scorer needs --encoder (a sidecar URL or an EMB1 store path)"));
        };
        if !is_url(target) {
            let path = PathBuf::from(target);
            manifest.input(&path)?;
            let store = EmbeddingStore::read(&path)?;
            let source = StoreSource::from_store(store, &self.model_name, self.input_side)?;
            return Ok(Encoder { source: Arc::new(source), remote: None });
        }
        let mut endpoint = EncoderEndpoint::new(target.clone());
        endpoint.max_in_flight = self.max_in_flight;
        let client = EncoderClient::connect(endpoint)?;
        let cache_path = cache_dir_from_env().map(|d| d.join(client.descriptor().cache_file_name()));
        let cache = match &cache_path {
            Some(p) if p.exists() => {
                log::info!("loading embedding cache {}", p.display());
                EmbeddingStore::read(p)?
            }
            _ => EmbeddingStore::new(),
        };
        let remote = Arc::new(RemoteSource::with_cache(client, cache));
        Ok(Encoder { source: remote.clone(), remote: Some((remote, cache_path)) })
    }
}

impl Encoder {
    /// Writes the remote cache back to `COMPOSE_PROBE_CACHE`, if set.
    pub fn close(&self) -> Outcome {
        if let Some((remote, Some(path))) = &self.remote {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).or_exit(RUNTIME)?;
            }
            remote.cache_snapshot().write(path)?;
            log::info!("embedding cache saved to {}", path.display());
        }
        Ok(())
    }
}
