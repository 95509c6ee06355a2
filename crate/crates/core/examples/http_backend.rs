//! Talks to an embedding service over HTTP. A throwaway server on a local
//! port plays the service; a second endpoint points at a closed port to
//! show the retry contract.
//!
//!     cargo run --example http_backend

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use mugshot_kit::demo::{demo_subjects, render_face, Variant};
use mugshot_kit::gateway::{read_journal, BackendEndpoint, BackendKind, Journal, ModelGateway};
use mugshot_kit::imageio;

/// Answers `POST /embed` with a 4-d vector derived from the body length.
fn serve(listener: TcpListener, requests: usize) {
    for stream in listener.incoming().take(requests) {
        let mut stream = stream.expect("accept");
        let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
        let mut length = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).expect("read header");
            if line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().expect("numeric length");
            }
        }
        let mut body = vec![0; length];
        reader.read_exact(&mut body).expect("read body");
        let n = body.len() as f64;
        let reply = format!("{{\"vector\": [{}, {}, {}, 1.0]}}", n % 7.0, n % 11.0, n % 13.0);
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .expect("write response");
    }
}

fn main() -> mugshot_kit::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| mugshot_kit::Error::io("<tempdir>", e))?;
    let image = dir.path().join("face.png");
    let png = imageio::encode_rgb_png(&render_face(&demo_subjects()[0], Variant::Reference, "http"));
    std::fs::write(&image, png).map_err(|e| mugshot_kit::Error::io(&image, e))?;

    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| mugshot_kit::Error::io("127.0.0.1:0", e))?;
    let url = format!("http://{}", listener.local_addr().expect("bound address"));
    let server = std::thread::spawn(move || serve(listener, 2));

    let journal = dir.path().join("journal.jsonl");
    let mut endpoint = BackendEndpoint::url(BackendKind::Embed, &url);
    endpoint.timeout = Duration::from_secs(5);
    let gateway = ModelGateway::new(dir.path()).with_endpoint(endpoint)?.with_journal(Journal::open(&journal)?);
    let a = gateway.embed("S01", &image, "reference")?;
    let b = gateway.embed("S01", &image, "reference")?;
    println!("{url}/embed -> {:?} (repeatable: {})", a.vector, a.vector == b.vector);
    server.join().expect("server thread");

    // the listener is gone, so every attempt is refused
    let mut dead = BackendEndpoint::url(BackendKind::Embed, &url);
    dead.max_retries = 2;
    let gateway = ModelGateway::new(dir.path()).with_endpoint(dead)?.with_journal(Journal::open(&journal)?);
    let err = gateway.embed("S01", &image, "reference").unwrap_err();
    println!("error: {err} (exit code {})", err.exit_code());
    for r in read_journal(&journal)? {
        println!("journal #{}: ok={} attempts={}", r.seq, r.ok, r.attempts);
    }
    Ok(())
}
