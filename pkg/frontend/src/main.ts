import { startApp } from './app.js';

startApp().catch((err) => {
  const banner = document.getElementById('banner');
  if (banner) {
    banner.textContent = `failed to start: ${(err as Error).message}`;
    banner.className = 'banner error';
  }
});
