//! Encoder client against an in-process HTTP mock of the sidecar.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use compose_probe_core::crops::{CropConfig, ImageRaster};
use compose_probe_core::embedding::{
    crop_key, encode_remote, text_key, EmbedError, EmbeddingKind, EmbeddingSource, EmbeddingStore, EncodeBatch,
    EncoderClient, EncoderEndpoint, ImageRef, KeyedImage, RemoteSource, StoreSource,
};
use compose_probe_core::eval::CaptionInput;
use compose_probe_core::segment::{Granularity, SegmentSource, SegmentationStrategy, Segmenter};
use compose_probe_core::sgi::{global_score, sgi_score, SgiConfig};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const DIM: usize = 8;

#[derive(Clone, Copy, PartialEq)]
enum Fault {
    None,
    WrongDim,
    ShortRows,
    /// Answer this status for the first `n` encode requests.
    Status(u16, usize),
}

struct Mock {
    url: String,
    encode_calls: Arc<AtomicUsize>,
    batch_sizes: Arc<Mutex<Vec<usize>>>,
}

fn text_vector(text: &str) -> Vec<f32> {
    let d = Sha256::digest(text.as_bytes());
    (0..DIM).map(|k| f32::from(d[k]) / 255.0 - 0.5).collect()
}

fn image_vector(png: &[u8]) -> Vec<f32> {
    let img = ImageRaster::decode(png).unwrap();
    let mut v = vec![0.0f32; DIM];
    for (i, &p) in img.pixels().iter().enumerate() {
        v[i % DIM] += f32::from(p) / 255.0;
    }
    v[DIM - 1] += 1.0;
    v
}

fn respond(stream: &mut TcpStream, status: u16, body: &Value) {
    let text = body.to_string();
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        503 => "Service Unavailable",
        _ => "Error",
    };
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
        text.len()
    );
    stream.write_all(head.as_bytes()).unwrap();
    stream.write_all(text.as_bytes()).unwrap();
}

fn read_request(stream: &TcpStream) -> Option<(String, String, Vec<u8>)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((method, path, body))
}

fn handle(mut stream: TcpStream, fault: Fault, calls: &AtomicUsize, sizes: &Mutex<Vec<usize>>) {
    let Some((method, path, body)) = read_request(&stream) else { return };
    if method == "GET" && path == "/v1/descriptor" {
        let d = json!({"model_name": "mock-encoder", "embedding_dim": DIM, "layer": "last", "input_side": 32});
        return respond(&mut stream, 200, &d);
    }
    if method != "POST" {
        return respond(&mut stream, 404, &json!({"error": "not found"}));
    }
    let n = calls.fetch_add(1, Ordering::SeqCst);
    if let Fault::Status(code, times) = fault {
        if n < times {
            return respond(&mut stream, code, &json!({"error": format!("injected {code}")}));
        }
    }
    let Ok(req) = serde_json::from_slice::<Value>(&body) else {
        return respond(&mut stream, 400, &json!({"error": "body is not json"}));
    };
    let mode = req["mode"].as_str().unwrap_or("");
    let (rows, counts): (Vec<Vec<f32>>, Vec<usize>) = match path.as_str() {
        "/v1/encode/text" => {
            let texts: Vec<String> = req["texts"].as_array().unwrap().iter().map(|t| t.as_str().unwrap().to_string()).collect();
            sizes.lock().unwrap().push(texts.len());
            let mut rows = Vec::new();
            let mut counts = Vec::new();
            for t in &texts {
                if mode == "tokens" {
                    let words: Vec<&str> = t.split_whitespace().collect();
                    for w in ["<bos>"].iter().chain(words.iter()).chain(["<eos>"].iter()) {
                        rows.push(text_vector(w));
                    }
                    counts.push(words.len() + 2);
                } else {
                    rows.push(text_vector(t));
                    counts.push(1);
                }
            }
            (rows, counts)
        }
        "/v1/encode/image" => {
            let engine = base64::engine::general_purpose::STANDARD;
            let imgs: Vec<Vec<u8>> =
                req["images_b64"].as_array().unwrap().iter().map(|b| engine.decode(b.as_str().unwrap()).unwrap()).collect();
            sizes.lock().unwrap().push(imgs.len());
            let mut rows = Vec::new();
            let mut counts = Vec::new();
            for png in &imgs {
                let v = image_vector(png);
                let k = if mode == "patches" { 4 } else { 1 };
                for p in 0..k {
                    rows.push(v.iter().map(|x| x + p as f32).collect());
                }
                counts.push(k);
            }
            (rows, counts)
        }
        _ => return respond(&mut stream, 400, &json!({"error": "unknown route"})),
    };
    let rows: Vec<Vec<f32>> = match fault {
        Fault::WrongDim => rows.into_iter().map(|mut r| {
            r.push(0.0);
            r
        }).collect(),
        Fault::ShortRows => rows[..rows.len() - 1].to_vec(),
        _ => rows,
    };
    respond(&mut stream, 200, &json!({"embeddings": rows, "rows_per_item": counts}));
}

fn start(fault: Fault) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let encode_calls = Arc::new(AtomicUsize::new(0));
    let batch_sizes = Arc::new(Mutex::new(Vec::new()));
    let (calls, sizes) = (encode_calls.clone(), batch_sizes.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let (calls, sizes) = (calls.clone(), sizes.clone());
            thread::spawn(move || handle(stream, fault, &calls, &sizes));
        }
    });
    Mock { url, encode_calls, batch_sizes }
}

fn endpoint(mock: &Mock) -> EncoderEndpoint {
    let mut e = EncoderEndpoint::new(&mock.url);
    e.timeout = Duration::from_secs(10);
    e
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("caption number {i}")).collect()
}

#[test]
fn descriptor_is_read_on_connect() {
    let mock = start(Fault::None);
    let client = EncoderClient::connect(endpoint(&mock)).unwrap();
    assert_eq!(client.descriptor().model_name, "mock-encoder");
    assert_eq!(client.descriptor().embedding_dim, DIM);
    assert_eq!(client.descriptor().input_side, 32);
}

#[test]
fn text_batches_preserve_order_across_chunks() {
    let mock = start(Fault::None);
    let mut ep = endpoint(&mock);
    ep.max_batch = 2;
    let client = EncoderClient::connect(ep).unwrap();
    let input = texts(5);
    let out = client.encode_texts(&input, false).unwrap();
    assert_eq!(out.len(), 5);
    for (t, m) in input.iter().zip(&out) {
        assert_eq!(m.rows(), 1);
        assert_eq!(m.data(), &text_vector(t)[..]);
    }
    assert_eq!(*mock.batch_sizes.lock().unwrap(), vec![2, 2, 1]);
}

#[test]
fn token_mode_uses_rows_per_item() {
    let mock = start(Fault::None);
    let client = EncoderClient::connect(endpoint(&mock)).unwrap();
    let out = client.encode_texts(&["a black cat".into(), "dog".into()], true).unwrap();
    assert_eq!(out[0].rows(), 5);
    assert_eq!(out[1].rows(), 3);
    assert_eq!(out[0].row(1), &text_vector("a")[..]);
}

#[test]
fn image_batches_round_trip_pixels() {
    let mock = start(Fault::None);
    let client = EncoderClient::connect(endpoint(&mock)).unwrap();
    let a = ImageRaster::filled(4, 4, [255, 0, 0]);
    let b = ImageRaster::from_fn(4, 4, |x, y| [(x * 60) as u8, (y * 60) as u8, 9]);
    let out = client.encode_images(&[a.clone(), b.clone()], false).unwrap();
    assert_eq!(out[0].data(), &image_vector(&a.encode_png().unwrap())[..]);
    assert_eq!(out[1].data(), &image_vector(&b.encode_png().unwrap())[..]);
    let patches = client.encode_images(&[a], true).unwrap();
    assert_eq!(patches[0].rows(), 4);
}

#[test]
fn wrong_width_is_rejected() {
    let mock = start(Fault::WrongDim);
    let client = EncoderClient::connect(endpoint(&mock)).unwrap();
    let err = client.encode_texts(&texts(2), false).unwrap_err();
    assert!(matches!(err, EmbedError::DimMismatch { expected: DIM, actual } if actual == DIM + 1), "{err}");
}

#[test]
fn row_count_mismatch_is_a_protocol_error() {
    let mock = start(Fault::ShortRows);
    let client = EncoderClient::connect(endpoint(&mock)).unwrap();
    let err = client.encode_texts(&texts(3), false).unwrap_err();
    assert!(matches!(err, EmbedError::Protocol(_)), "{err}");
}

#[test]
fn empty_batch_never_hits_the_wire() {
    let mock = start(Fault::None);
    let client = EncoderClient::connect(endpoint(&mock)).unwrap();
    assert!(matches!(client.encode_texts(&[], false), Err(EmbedError::EmptyBatch)));
    assert!(matches!(client.encode_images(&[], false), Err(EmbedError::EmptyBatch)));
    assert_eq!(mock.encode_calls.load(Ordering::SeqCst), 0);
}

#[test]
fn bad_request_is_not_retried() {
    let mock = start(Fault::Status(400, usize::MAX));
    let client = EncoderClient::connect(endpoint(&mock)).unwrap();
    let err = client.encode_texts(&texts(1), false).unwrap_err();
    match err {
        EmbedError::Server { status: 400, message } => assert_eq!(message, "injected 400"),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(mock.encode_calls.load(Ordering::SeqCst), 1);
}

#[test]
fn unavailable_is_retried_then_succeeds() {
    let mock = start(Fault::Status(503, 2));
    let client = EncoderClient::connect(endpoint(&mock)).unwrap();
    let out = client.encode_texts(&texts(1), false).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(mock.encode_calls.load(Ordering::SeqCst), 3);
}

#[test]
fn unavailable_gives_up_after_retries() {
    let mock = start(Fault::Status(503, usize::MAX));
    let mut ep = endpoint(&mock);
    ep.retries = 1;
    let client = EncoderClient::connect(ep).unwrap();
    let err = client.encode_texts(&texts(1), false).unwrap_err();
    assert!(matches!(err, EmbedError::Server { status: 503, .. }));
    assert!(err.is_retryable());
    assert_eq!(mock.encode_calls.load(Ordering::SeqCst), 2);
}

#[test]
fn unreachable_sidecar_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut ep = EncoderEndpoint::new(format!("http://127.0.0.1:{port}"));
    ep.retries = 0;
    ep.timeout = Duration::from_secs(2);
    let err = EncoderClient::connect(ep).unwrap_err();
    assert!(matches!(err, EmbedError::Transport(_)), "{err}");
}

#[test]
fn keyed_records_follow_request_order() {
    let mock = start(Fault::None);
    let client = EncoderClient::connect(endpoint(&mock)).unwrap();
    let input = texts(3);
    let recs = encode_remote(&client, &EncodeBatch::Texts(input.clone()), EmbeddingKind::GlobalText).unwrap();
    let keys: Vec<String> = recs.iter().map(|r| r.key.clone()).collect();
    assert_eq!(keys, input.iter().map(|t| text_key(t)).collect::<Vec<_>>());
    let img = KeyedImage { key: "img:x/crop:0,0,4,4".into(), raster: ImageRaster::filled(4, 4, [1, 2, 3]) };
    let err = encode_remote(&client, &EncodeBatch::Images(vec![img]), EmbeddingKind::GlobalText).unwrap_err();
    assert!(matches!(err, EmbedError::Protocol(_)));
}

#[test]
fn remote_source_caches_and_matches_store_replay() {
    let mock = start(Fault::None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.png");
    ImageRaster::from_fn(48, 40, |x, y| [(x * 5) as u8, (y * 6) as u8, ((x + y) * 2) as u8]).save(&path).unwrap();
    let image = ImageRef::with_path("scene.png", &path);

    let source = RemoteSource::new(EncoderClient::connect(endpoint(&mock)).unwrap());
    let config = SgiConfig {
        crops: CropConfig::grid(),
        strategy: SegmentationStrategy::new(Granularity::CoarseGrained, SegmentSource::Automatic),
    };
    let seg = Segmenter::default();
    let caption = CaptionInput::plain("a black cat and a white dog");
    let first = sgi_score(&image, &caption, &source, &config, &seg).unwrap();
    let calls = mock.encode_calls.load(Ordering::SeqCst);
    let again = sgi_score(&image, &caption, &source, &config, &seg).unwrap();
    assert_eq!(first, again);
    assert_eq!(mock.encode_calls.load(Ordering::SeqCst), calls, "second pass must be served from cache");

    let global = global_score(&image, caption.text, &source).unwrap();
    let store_path = dir.path().join("cache.emb");
    source.cache_snapshot().write(&store_path).unwrap();
    let replay = StoreSource::new(EmbeddingStore::read(&store_path).unwrap(), source.descriptor().clone()).unwrap();
    assert_eq!(sgi_score(&image, &caption, &replay, &config, &seg).unwrap(), first);
    assert_eq!(global_score(&image, caption.text, &replay).unwrap(), global);
    assert!(replay.store().contains(&crop_key("scene.png", compose_probe_core::CropRect::full(32, 32))));
}
