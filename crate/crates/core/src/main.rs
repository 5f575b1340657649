use sinkdiv::alloc::CountingAllocator;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

fn main() {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let code = sinkdiv::cli::run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock());
    std::process::exit(code);
}
